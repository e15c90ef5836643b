import io
import socket
import subprocess
import sys

import numpy as np
import pytest

from akd_bridge import (
    BridgeConfig,
    alpha_bar,
    draw_noise,
    handle_request,
    make_predictor,
    pool2,
    pool2_adjoint,
    read_frame,
    serve_stream,
    write_frame,
)

RNG = np.random.default_rng(8)
Z = RNG.standard_normal((2, 6, 6, 3)).astype(np.float32)


def _header(mode="velocity", t=0.4, seed=11, shape=None):
    return {"shape": list(Z.shape if shape is None else shape), "t": t, "seed": seed,
            "cfg_scale": 100.0, "prompt": "", "mode": mode}


def _schedule(t):
    ab = alpha_bar(t)
    return np.sqrt(ab), np.sqrt(1.0 - ab)


def test_velocity_echo_is_byte_exact():
    cfg = BridgeConfig(predictor="echo")
    resp, out = handle_request(_header(), Z, cfg, make_predictor("echo"))
    assert resp["status"] == "ok"
    assert resp["shape"] == list(Z.shape)
    assert out.tobytes() == Z.tobytes()


def test_sds_grad_oracle_vanishes():
    cfg = BridgeConfig(predictor="oracle")
    resp, out = handle_request(_header("sds_grad", t=0.62, seed=5), Z, cfg,
                               make_predictor("oracle"))
    assert resp["status"] == "ok"
    assert np.abs(out).max() <= 1e-6


def test_sds_grad_zero_matches_closed_form():
    t, seed = 0.31, 99
    cfg = BridgeConfig(predictor="zero")
    resp, out = handle_request(_header("sds_grad", t=t, seed=seed), Z, cfg,
                               make_predictor("zero"))
    assert resp["status"] == "ok"
    s, c = _schedule(t)
    z64 = np.asarray(Z, np.float64)
    z_t = s * z64 + c * np.asarray(draw_noise(Z.shape, seed), np.float64)
    want = np.ascontiguousarray(z64 - s * z_t, dtype="<f4")
    assert np.array_equal(out, want)


def test_latent_sds_grad_zero_matches_pooled_closed_form():
    t, seed = 0.48, 4
    cfg = BridgeConfig(predictor="zero", latent=True)
    resp, out = handle_request(_header("sds_grad", t=t, seed=seed), Z, cfg,
                               make_predictor("zero"))
    assert resp["status"] == "ok"
    assert resp["shape"] == list(Z.shape)
    s, c = _schedule(t)
    lat = pool2(np.asarray(Z, np.float64))
    lat_t = s * lat + c * np.asarray(draw_noise(lat.shape, seed), np.float64)
    want = np.ascontiguousarray(pool2_adjoint(lat - s * lat_t), dtype="<f4")
    assert np.array_equal(out, want)


def test_latent_sds_grad_oracle_vanishes():
    cfg = BridgeConfig(predictor="oracle", latent=True)
    resp, out = handle_request(_header("sds_grad", t=0.2, seed=13), Z, cfg,
                               make_predictor("oracle"))
    assert resp["status"] == "ok"
    assert np.abs(out).max() <= 1e-6


def test_latent_mode_requires_even_spatial_dims():
    cfg = BridgeConfig(predictor="zero", latent=True)
    odd = np.zeros((1, 4, 5, 3), dtype=np.float32)
    resp, out = handle_request(_header("sds_grad", shape=odd.shape), odd, cfg,
                               make_predictor("zero"))
    assert resp["status"] == "error" and resp["shape"] == [0] and out is None


@pytest.mark.parametrize("breakage", ["no_t", "bad_mode", "neg_seed", "nan_payload"])
def test_requests_are_validated(breakage):
    cfg = BridgeConfig(predictor="zero")
    header, payload = _header(), Z
    if breakage == "no_t":
        header = {k: v for k, v in header.items() if k != "t"}
    elif breakage == "bad_mode":
        header["mode"] = "noise"
    elif breakage == "neg_seed":
        header["seed"] = -3
    else:
        payload = Z.copy()
        payload[0, 0, 0, 0] = np.nan
    resp, out = handle_request(header, payload, cfg, make_predictor("zero"))
    assert resp["status"] == "error" and out is None


def test_misshapen_stub_output_is_reported():
    class Lying:
        def velocity(self, z, z_t, t, seed):
            return np.zeros((1, 2))

    cfg = BridgeConfig(predictor="zero")
    resp, out = handle_request(_header(), Z, cfg, Lying())
    assert resp["status"] == "error" and out is None


def test_stream_keeps_serving_after_bad_magic():
    request = io.BytesIO()
    write_frame(request, _header(t=0.25, seed=1), Z)
    request.write(b"JUNKJUNK")
    write_frame(request, _header(t=0.75, seed=2), Z)
    request.seek(0)
    response = io.BytesIO()
    serve_stream(request, response, BridgeConfig(predictor="echo"), make_predictor("echo"))
    response.seek(0)
    first = read_frame(response)
    error = read_frame(response)
    second = read_frame(response)
    assert first[0]["status"] == "ok" and first[1].tobytes() == Z.tobytes()
    assert error[0]["status"] == "error" and "magic" in error[0]["message"]
    assert second[0]["status"] == "ok" and second[1].tobytes() == Z.tobytes()
    assert read_frame(response) is None


def _spawn(*args):
    proc = subprocess.Popen(
        [sys.executable, "-m", "akd_bridge", *args],
        stdin=subprocess.PIPE, stdout=subprocess.PIPE, stderr=subprocess.PIPE)
    return proc


def _request(stream, header, payload):
    write_frame(stream, header, payload)
    return read_frame(stream)


def test_tcp_server_end_to_end():
    proc = _spawn("--port", "0", "--predictor", "oracle")
    try:
        line = proc.stdout.readline().decode().strip()
        assert line.startswith("LISTENING ")
        port = int(line.split()[1])

        # first connection: velocity mode, client-side assembly cancels
        with socket.create_connection(("127.0.0.1", port), timeout=30.0) as sock:
            sock.settimeout(30.0)
            stream = sock.makefile("rwb")
            t, seed = 0.55, 321
            resp, v = _request(stream, _header(t=t, seed=seed), Z)
            assert resp["status"] == "ok"
            s, c = _schedule(t)
            z64 = np.asarray(Z, np.float64)
            z_t = s * z64 + c * np.asarray(draw_noise(Z.shape, seed), np.float64)
            grad = z64 - (s * z_t - c * np.asarray(v, np.float64))
            assert np.abs(grad).max() <= 1e-6

            # malformed magic gets an error response, then service resumes
            stream.write(b"NOTMAGIC")
            stream.flush()
            err = read_frame(stream)
            assert err[0]["status"] == "error"
            resp, v = _request(stream, _header(t=0.3, seed=7), Z)
            assert resp["status"] == "ok"

        # a second connection is served just the same
        with socket.create_connection(("127.0.0.1", port), timeout=30.0) as sock:
            sock.settimeout(30.0)
            stream = sock.makefile("rwb")
            resp, grad = _request(stream, _header("sds_grad", t=0.8, seed=5), Z)
            assert resp["status"] == "ok"
            assert np.abs(grad).max() <= 1e-6
    finally:
        proc.terminate()
        proc.wait()


def test_stdio_server_round_trip():
    request = io.BytesIO()
    write_frame(request, _header(t=0.5, seed=3), Z)
    proc = _spawn("--stdio", "--predictor", "zero")
    out, err = proc.communicate(input=request.getvalue(), timeout=60)
    assert proc.returncode == 0, err.decode()
    resp, payload = read_frame(io.BytesIO(out))
    assert resp["status"] == "ok"
    assert payload.shape == Z.shape
    assert not payload.any()


def test_transport_flags_are_exclusive():
    proc = _spawn("--stdio", "--port", "4000")
    _, err = proc.communicate(timeout=30)
    assert proc.returncode == 2
    assert b"exactly one transport" in err
