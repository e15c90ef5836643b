import json
import socket
import socketserver
import struct
import threading

import numpy as np
import pytest

from akd.guidance import (
    ActivationMeter,
    AttractorPredictor,
    CosineSchedule,
    LocalProvider,
    LossWeights,
    OraclePredictor,
    ProviderError,
    RemoteProvider,
    RenderChain,
    WireError,
    ZeroPredictor,
    bone_corners,
    corner_heights,
    draw_noise,
    ground_grad,
    ground_loss,
    ground_penalty,
    read_message,
    sds_gradient,
    smoothness_grad,
    smoothness_loss,
    write_message,
)
from akd.guidance.wire import MAGIC
from akd.skeleton import fk_arrays, forward_kinematics
from akd.splat import Camera, GaussianCloud, GroundConfig
from akd.transforms import RigidTransform, random_rotation

from _geom import chain_skeleton


# ---------------------------------------------------------------- schedule


def test_schedule_midpoint_and_clamps():
    sched = CosineSchedule()
    assert np.isclose(sched.alpha_bar(0.5), 0.5)
    assert sched.alpha_bar(0.0) == 1.0 - 1e-4
    assert sched.alpha_bar(1.0) == 1e-4
    t = np.linspace(0.02, 0.98, 97)
    ab = sched.alpha_bar(t)
    assert np.all(np.diff(ab) < 0)
    assert float(sched.weight(0.37)) == 1.0


def test_schedule_rejects_bad_clamps():
    with pytest.raises(ValueError):
        CosineSchedule(floor=0.5, ceil=0.4)


def test_noise_draw_is_seed_deterministic():
    a = draw_noise((3, 4, 4, 3), 1234)
    b = draw_noise((3, 4, 4, 3), 1234)
    c = draw_noise((3, 4, 4, 3), 1235)
    assert a.dtype == np.float32
    assert np.array_equal(a, b)
    assert not np.array_equal(a, c)


# --------------------------------------------------------------- gradient


def test_oracle_predictor_nullifies_gradient():
    sched = CosineSchedule()
    oracle = OraclePredictor(sched)
    rng = np.random.default_rng(7)
    worst = 0.0
    for k in range(100):
        z = rng.random((2, 6, 5, 3)).astype(np.float32)
        t = float(rng.uniform(0.02, 0.98))
        eps = draw_noise(z.shape, 9000 + k)
        g = sds_gradient(z, t, eps, oracle, sched, seed=9000 + k)
        worst = max(worst, float(np.abs(g).max()))
    assert worst < 1e-6


def test_zero_predictor_closed_form():
    sched = CosineSchedule()
    rng = np.random.default_rng(8)
    z = rng.random((2, 4, 4, 3)).astype(np.float32)
    for t in (0.05, 0.3, 0.77):
        eps = draw_noise(z.shape, 55)
        g = sds_gradient(z, t, eps, ZeroPredictor(), sched, seed=55)
        ab = float(sched.alpha_bar(t))
        want = (
            z.astype(np.float64)
            - ab * z.astype(np.float64)
            - np.sqrt(ab) * np.sqrt(1.0 - ab) * eps.astype(np.float64)
        )
        np.testing.assert_allclose(g, want, atol=1e-6)


def test_zero_noise_oracle_still_null():
    sched = CosineSchedule()
    oracle = OraclePredictor(sched)
    z = np.random.default_rng(9).random((1, 5, 5, 3)).astype(np.float32)
    eps = np.zeros_like(z)
    for t in (0.02, 0.5, 0.98):
        g = sds_gradient(z, t, eps, oracle, sched, seed=0)
        assert np.abs(g).max() < 1e-6


def test_attractor_pulls_toward_target():
    sched = CosineSchedule()
    rng = np.random.default_rng(10)
    z = rng.random((2, 3, 3, 3)).astype(np.float32)
    target = rng.random((2, 3, 3, 3)).astype(np.float32)
    eps = draw_noise(z.shape, 4)
    g = sds_gradient(z, 0.4, eps, AttractorPredictor(target, sched), sched, seed=4)
    np.testing.assert_allclose(g, z.astype(np.float64) - target, atol=1e-5)


def test_gradient_scales_linearly_with_weight():
    class Scaled(CosineSchedule):
        def weight(self, t):
            return 3.0

    rng = np.random.default_rng(11)
    z = rng.random((1, 4, 4, 3)).astype(np.float32)
    eps = draw_noise(z.shape, 77)
    base = sds_gradient(z, 0.3, eps, ZeroPredictor(), CosineSchedule(), seed=77)
    scaled = sds_gradient(z, 0.3, eps, ZeroPredictor(), Scaled(), seed=77)
    np.testing.assert_allclose(scaled, 3.0 * base, rtol=1e-6, atol=1e-7)


def test_gradient_rejects_bad_predictor_output():
    sched = CosineSchedule()
    z = np.zeros((1, 2, 2, 3), dtype=np.float32)
    eps = np.zeros_like(z)

    class WrongShape:
        def velocity(self, z_t, t, **_):
            return np.zeros((1, 2, 2, 2))

    class NotFinite:
        def velocity(self, z_t, t, **_):
            out = np.zeros_like(z_t)
            out[0, 0, 0, 0] = np.nan
            return out

    with pytest.raises(ValueError, match="shape"):
        sds_gradient(z, 0.5, eps, WrongShape(), sched)
    with pytest.raises(ValueError, match="finite"):
        sds_gradient(z, 0.5, eps, NotFinite(), sched)
    with pytest.raises(ValueError, match="shape"):
        sds_gradient(z, 0.5, np.zeros((2, 2, 2, 3)), ZeroPredictor(), sched)


def test_local_provider_matches_direct_call():
    sched = CosineSchedule()
    provider = LocalProvider(ZeroPredictor(), sched)
    z = np.random.default_rng(3).random((2, 4, 4, 3)).astype(np.float32)
    got = provider.gradient(z, 0.42, seed=123)
    eps = draw_noise(z.shape, 123)
    want = sds_gradient(z, 0.42, eps, ZeroPredictor(), sched, seed=123)
    assert np.array_equal(got, want)


# ------------------------------------------------------------- smoothness


def test_smoothness_zero_for_constant_and_linear():
    const = np.ones((6, 4))
    lin = np.outer(np.arange(6.0), np.array([1.0, -2.0, 0.5, 3.0]))
    assert smoothness_loss(const) == 0.0
    assert smoothness_loss(lin) < 1e-14


def test_smoothness_single_spike_value():
    a = 0.5
    theta = np.array([0.0, 0.0, a, 0.0, 0.0])
    assert smoothness_loss(theta) == 4.0 * a / 3.0


def test_smoothness_time_reversal_invariant():
    rng = np.random.default_rng(12)
    theta = rng.normal(size=(9, 2, 3))
    fwd = smoothness_loss(theta)
    rev = smoothness_loss(theta[::-1])
    assert abs(fwd - rev) < 1e-12


def test_smoothness_needs_three_frames():
    with pytest.raises(ValueError, match="3 frames"):
        smoothness_loss(np.zeros((2, 4)))
    with pytest.raises(ValueError, match="3 frames"):
        smoothness_grad(np.zeros((2, 4)))


def test_smoothness_grad_matches_fd():
    rng = np.random.default_rng(13)
    theta = rng.normal(size=(7, 5))
    grad = smoothness_grad(theta)
    eps = 1e-6
    for idx in [(0, 0), (3, 2), (6, 4), (1, 1)]:
        plus = theta.copy()
        plus[idx] += eps
        minus = theta.copy()
        minus[idx] -= eps
        fd = (smoothness_loss(plus) - smoothness_loss(minus)) / (2 * eps)
        assert abs(fd - grad[idx]) < 1e-8


# ----------------------------------------------------------------- ground


def test_ground_penalty_two_corner_example():
    assert ground_penalty(np.array([-1.0, 2.0])) == 0.5


def _posed_transforms(skeleton, rng, frames):
    world_r = np.empty((frames, skeleton.bone_count, 3, 3))
    world_t = np.empty((frames, skeleton.bone_count, 3))
    for f in range(frames):
        angles = rng.uniform(-0.5, 0.5, size=(skeleton.bone_count - 1, 3))
        root = RigidTransform(random_rotation(rng), rng.normal(size=3))
        world_r[f], world_t[f] = fk_arrays(
            skeleton, root.rotation, root.translation, angles
        )
    return world_r, world_t


def test_ground_loss_matches_bruteforce_corners():
    rng = np.random.default_rng(14)
    skel = chain_skeleton(3, seg_len=0.6)
    world_r, world_t = _posed_transforms(skel, rng, frames=4)
    got = ground_loss(world_r, world_t, skel)
    acc = []
    for f in range(4):
        for b, bone in enumerate(skel.bones):
            h = bone.half_extents
            for sx in (-1, 1):
                for sy in (-1, 1):
                    for sz in (-1, 1):
                        corner = np.array([sx * h[0], sy * h[1], sz * h[2]])
                        y = (world_r[f, b] @ corner + world_t[f, b])[1]
                        acc.append(max(-y, 0.0))
    assert abs(got - np.mean(acc)) < 1e-12


def test_ground_loss_zero_above_plane():
    skel = chain_skeleton(2, seg_len=0.5)
    world_r, world_t = _posed_transforms(skel, np.random.default_rng(1), 1)
    world_t[..., 1] += 10.0
    assert ground_loss(world_r, world_t, skel) == 0.0


def test_ground_loss_linear_in_shift_for_grounded_box():
    # one box resting on the plane: 4 corners at y=0, 4 at the top
    skel = chain_skeleton(1, seg_len=0.4)
    world_r = np.eye(3)[None, None]
    world_t = np.array([[[0.0, 0.2, 0.0]]])  # half extent 0.2 along y
    assert ground_loss(world_r, world_t, skel) == 0.0
    for h in (0.01, 0.05, 0.1):
        shifted = world_t.copy()
        shifted[..., 1] -= h
        loss = ground_loss(world_r, shifted, skel)
        assert abs(loss - 0.5 * h) < 1e-12


def test_ground_loss_horizontal_rigid_invariance():
    rng = np.random.default_rng(15)
    skel = chain_skeleton(3, seg_len=0.6)
    world_r, world_t = _posed_transforms(skel, rng, frames=3)
    base = ground_loss(world_r, world_t, skel)
    phi = 1.1
    yaw = np.array(
        [
            [np.cos(phi), 0.0, np.sin(phi)],
            [0.0, 1.0, 0.0],
            [-np.sin(phi), 0.0, np.cos(phi)],
        ]
    )
    shift = np.array([3.7, 0.0, -1.2])
    moved_r = np.einsum("ij,fbjk->fbik", yaw, world_r)
    moved_t = np.einsum("ij,fbj->fbi", yaw, world_t) + shift
    assert abs(ground_loss(moved_r, moved_t, skel) - base) < 1e-12


def test_ground_grad_matches_fd():
    rng = np.random.default_rng(16)
    skel = chain_skeleton(2, seg_len=0.5)
    world_r, world_t = _posed_transforms(skel, rng, frames=2)
    world_t[..., 1] -= 0.3  # force some corners below
    r_bar, t_bar = ground_grad(world_r, world_t, skel)
    eps = 1e-6
    rng2 = np.random.default_rng(17)
    for _ in range(10):
        f = rng2.integers(2)
        b = rng2.integers(2)
        i = rng2.integers(3)
        tp = world_t.copy()
        tp[f, b, i] += eps
        tm = world_t.copy()
        tm[f, b, i] -= eps
        fd = (ground_loss(world_r, tp, skel) - ground_loss(world_r, tm, skel)) / (2 * eps)
        assert abs(fd - t_bar[f, b, i]) < 1e-8
        j = rng2.integers(3)
        rp = world_r.copy()
        rp[f, b, i, j] += eps
        rm = world_r.copy()
        rm[f, b, i, j] -= eps
        fd = (ground_loss(rp, world_t, skel) - ground_loss(rm, world_t, skel)) / (2 * eps)
        assert abs(fd - r_bar[f, b, i, j]) < 1e-8


def test_corner_helpers_shapes():
    skel = chain_skeleton(3, seg_len=0.5)
    assert bone_corners(skel).shape == (3, 8, 3)
    world_r = np.tile(np.eye(3), (2, 3, 1, 1))
    world_t = np.zeros((2, 3, 3))
    assert corner_heights(world_r, world_t, skel).shape == (2, 3, 8)


def test_loss_weights_validation():
    w = LossWeights()
    assert w.lambda_smooth == 2e5 and w.lambda_ground == 1e7
    with pytest.raises(ValueError):
        LossWeights(lambda_smooth=-1.0)


# ------------------------------------------------------------ render chain


def _chain_scene(frames=5, size=24, dtype=np.float64):
    skel = chain_skeleton(2, seg_len=0.5, axis=1)
    # a few kernels per bone, placed along each segment
    centers = []
    weights = []
    for b in range(2):
        ys = np.linspace(-0.15, 0.15, 3) + (0.0 if b == 0 else 0.5)
        for y in ys:
            centers.append([0.02 * (b + 1), y, 0.01])
            row = np.zeros(2)
            row[b] = 0.8
            row[1 - b] = 0.2
            weights.append(row)
    centers = np.asarray(centers)
    weights = np.asarray(weights)
    count = len(centers)
    cloud = GaussianCloud(
        opacities=np.full(count, 0.7),
        centers=centers,
        covariances=np.tile(np.eye(3) * 4e-3, (count, 1, 1)),
        sh_dc=np.tile(np.array([0.6, -0.4, 0.2]), (count, 1)),
    )
    rot = np.diag([1.0, -1.0, -1.0])
    pos = np.array([0.1, 0.25, 2.2])
    cam = Camera(
        fx=40.0, fy=40.0, cx=size / 2, cy=size / 2, width=size, height=size,
        extrinsics=RigidTransform(rot, -rot @ pos),
    )
    rng = np.random.default_rng(20)
    root_r = np.tile(np.eye(3), (frames, 1, 1))
    root_t = rng.normal(scale=0.02, size=(frames, 3))
    angles = rng.uniform(-0.3, 0.3, size=(frames, 1, 3))
    chain = RenderChain(skel, cloud, weights, ground=None, chunk_size=2, dtype=dtype)
    return skel, cloud, weights, cam, root_r, root_t, angles, chain


def test_chain_chunk_sizes_agree_bitwise():
    skel, cloud, weights, cam, root_r, root_t, angles, _ = _chain_scene()
    frames = root_r.shape[0]
    rng = np.random.default_rng(21)
    vbar = rng.normal(size=(frames, cam.height, cam.width, 3))
    results = []
    for chunk in (1, 2, frames):
        chain = RenderChain(skel, cloud, weights, chunk_size=chunk, dtype=np.float64)
        video = chain.forward(root_r, root_t, angles, cam)
        grads = chain.backward(vbar)
        results.append((video, grads))
    v0, g0 = results[0]
    for video, grads in results[1:]:
        assert np.array_equal(video, v0)
        for key in g0:
            assert np.abs(grads[key] - g0[key]).max() < 1e-12


def test_chain_activation_budget():
    skel, cloud, weights, cam, root_r, root_t, angles, _ = _chain_scene(frames=7)
    for chunk in (1, 2, 3, 7):
        meter = ActivationMeter()
        chain = RenderChain(skel, cloud, weights, chunk_size=chunk, dtype=np.float64, meter=meter)
        video = chain.forward(root_r, root_t, angles, cam)
        chain.backward(np.ones_like(video))
        bound = -(-7 // chunk) + 1  # ceil(F/chunk) + one in-flight recompute
        assert meter.peak <= bound
        assert meter.live == 0


def test_chain_gradients_match_fd():
    skel, cloud, weights, cam, root_r, root_t, angles, chain = _chain_scene()
    rng = np.random.default_rng(22)
    probe = rng.normal(size=(root_r.shape[0], cam.height, cam.width, 3))

    def loss(rt, ang):
        video = chain.forward(root_r, rt, ang, cam)
        return float(np.sum(video * probe))

    chain.forward(root_r, root_t, angles, cam)
    grads = chain.backward(probe)
    eps = 1e-5
    for idx in [(0, 0), (2, 1), (4, 2)]:
        tp = root_t.copy()
        tp[idx] += eps
        tm = root_t.copy()
        tm[idx] -= eps
        fd = (loss(tp, angles) - loss(tm, angles)) / (2 * eps)
        got = grads["root_translations"][idx]
        assert abs(fd - got) < 1e-3 * max(1.0, abs(fd))
    for idx in [(0, 0, 0), (1, 0, 1), (3, 0, 2), (4, 0, 0)]:
        ap = angles.copy()
        ap[idx] += eps
        am = angles.copy()
        am[idx] -= eps
        fd = (loss(root_t, ap) - loss(root_t, am)) / (2 * eps)
        got = grads["angles"][idx]
        assert abs(fd - got) < 1e-3 * max(1.0, abs(fd))


def test_chain_per_frame_cameras_and_errors():
    skel, cloud, weights, cam, root_r, root_t, angles, chain = _chain_scene(frames=3)
    cams = [cam, cam, cam]
    video = chain.forward(root_r, root_t, angles, cams)
    assert video.shape == (3, cam.height, cam.width, 3)
    with pytest.raises(ValueError, match="camera"):
        chain.forward(root_r, root_t, angles, [cam, cam])
    fresh = RenderChain(skel, cloud, weights, chunk_size=2)
    with pytest.raises(RuntimeError, match="forward"):
        fresh.backward(np.zeros((3, cam.height, cam.width, 3)))


def test_chain_ground_background_frames():
    skel, cloud, weights, cam, root_r, root_t, angles, _ = _chain_scene(frames=2)
    ground = GroundConfig(height=-1.0)
    chain = RenderChain(skel, cloud, weights, ground=ground, chunk_size=1)
    video = chain.forward(root_r, root_t, angles, cam)
    assert video.dtype == np.float32
    assert np.all(video >= 0.0) and np.all(video <= 1.0)


# ------------------------------------------------------------------- wire


class _StubHandler(socketserver.StreamRequestHandler):
    """Tiny guidance server used only by these tests."""

    def handle(self):
        sched = CosineSchedule()
        while True:
            try:
                header, payload = read_message(self.rfile)
            except WireError:
                return
            mode = header.get("mode")
            if mode not in ("velocity", "sds_grad"):
                write_message(
                    self.wfile,
                    {"shape": [0], "status": "error", "message": f"bad mode {mode!r}"},
                )
                continue
            z = payload.astype(np.float64)
            t = header["t"]
            eps = draw_noise(z.shape, header["seed"]).astype(np.float64)
            ab = float(sched.alpha_bar(t))
            s, c = np.sqrt(ab), np.sqrt(1.0 - ab)
            z_t = s * z + c * eps
            v = s * eps - c * z  # oracle velocity, z known server-side
            if mode == "velocity":
                out = v.astype(np.float32)
            else:
                z_hat = s * z_t - c * v
                out = (z - z_hat).astype(np.float32)
            write_message(
                self.wfile,
                {"shape": list(out.shape), "status": "ok", "message": ""},
                out,
            )


@pytest.fixture()
def stub_server():
    server = socketserver.ThreadingTCPServer(("127.0.0.1", 0), _StubHandler)
    server.daemon_threads = True
    thread = threading.Thread(target=server.serve_forever, daemon=True)
    thread.start()
    yield server.server_address
    server.shutdown()
    server.server_close()


def test_wire_roundtrip_bytes():
    import io

    payload = np.arange(12, dtype=np.float32).reshape(1, 2, 2, 3)
    buf = io.BytesIO()
    write_message(buf, {"shape": [1, 2, 2, 3], "status": "ok", "message": ""}, payload)
    raw = buf.getvalue()
    assert raw[:8] == MAGIC
    (hlen,) = struct.unpack("<I", raw[8:12])
    header = json.loads(raw[12 : 12 + hlen])
    assert header["status"] == "ok"
    assert raw[12 + hlen :] == payload.tobytes()
    buf.seek(0)
    got_header, got_payload = read_message(buf)
    assert got_header == header
    assert np.array_equal(got_payload, payload)


def test_wire_rejects_garbage():
    import io

    with pytest.raises(WireError, match="magic"):
        read_message(io.BytesIO(b"NOTMAGIC" + b"\x00" * 16))
    with pytest.raises(WireError, match="closed"):
        read_message(io.BytesIO(MAGIC + struct.pack("<I", 10) + b"{"))


def test_remote_provider_velocity_mode_nullity(stub_server):
    host, port = stub_server
    provider = RemoteProvider(host, port, mode="velocity")
    rng = np.random.default_rng(30)
    try:
        for k in range(5):
            z = rng.random((2, 4, 4, 3)).astype(np.float32)
            g = provider.gradient(z, 0.1 + 0.15 * k, seed=500 + k)
            assert np.abs(g).max() < 1e-6
    finally:
        provider.close()


def test_remote_provider_matches_local(stub_server):
    host, port = stub_server
    sched = CosineSchedule()
    remote = RemoteProvider(host, port, mode="sds_grad", schedule=sched)
    local = LocalProvider(OraclePredictor(sched), sched)
    z = np.random.default_rng(31).random((1, 6, 6, 3)).astype(np.float32)
    try:
        got = remote.gradient(z, 0.33, seed=321)
        want = local.gradient(z, 0.33, seed=321)
        np.testing.assert_allclose(got, want, atol=1e-6)
    finally:
        remote.close()


def test_remote_provider_error_response(stub_server):
    host, port = stub_server
    provider = RemoteProvider(host, port)
    provider.mode = "bogus"  # past the constructor check, rejected remotely
    z = np.zeros((1, 2, 2, 3), dtype=np.float32)
    try:
        with pytest.raises(ProviderError, match="bad mode"):
            provider.gradient(z, 0.5, seed=1)
    finally:
        provider.close()


def test_remote_provider_transport_failure():
    sock = socket.socket()
    sock.bind(("127.0.0.1", 0))
    host, port = sock.getsockname()
    sock.close()  # nothing listening now
    provider = RemoteProvider(host, port, timeout=0.5)
    with pytest.raises(ProviderError, match="transport"):
        provider.gradient(np.zeros((1, 2, 2, 3), dtype=np.float32), 0.5, seed=1)
