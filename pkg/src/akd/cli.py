"""Command-line surface over the skinning, rendering, distillation,
tracking, and simulation pipelines.

Exit codes: 0 success, 1 runtime failure (provider outage, diverging
simulation), 2 usage and input errors (bad flags, missing or inconsistent
files, unknown provider).
"""

import os

# AKD_THREADS caps internal parallelism. BLAS pools size themselves from
# these variables at import time, so they must be set before numpy loads.
_cap = os.environ.get("AKD_THREADS")
if _cap:
    for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS",
                 "NUMEXPR_NUM_THREADS", "VECLIB_MAXIMUM_THREADS"):
        os.environ.setdefault(_var, _cap)

import dataclasses
import json
import sys
from pathlib import Path

import click
import numpy as np
from PIL import Image

from .guidance import (
    CosineSchedule,
    LocalProvider,
    OraclePredictor,
    ProviderError,
    RemoteProvider,
    ZeroPredictor,
)
from .guidance.chain import RenderChain
from .optimize import DistillConfig, TrackConfig, distill, track
from .simulate import (
    SimConfig,
    build_model,
    export_diagnostics,
    max_penetration,
    project_initial,
    rollout,
    trajectory_to_motion,
)
from .skeleton import (
    MotionClip,
    Skeleton,
    fk_arrays,
    forward_kinematics,
    load_motion,
    load_skeleton,
    save_motion,
)
from .skinning import (
    SkinWeights,
    bone_visibility,
    cotangent_laplacian,
    load_obj,
    load_weights,
    save_weights,
    solve_weights,
    transfer_to_kernels,
)
from .splat import Camera, GaussianCloud, GroundConfig, load_ply
from .transforms import RigidTransform


def _fail(code, message):
    click.echo(f"error: {message}", err=True)
    sys.exit(code)


# ---------------------------------------------------------------- bundles

@dataclasses.dataclass
class AssetBundle:
    """Loaded asset files; kernel weights are per splat kernel."""

    skeleton: Skeleton = None
    cloud: GaussianCloud = None
    mesh: object = None
    kernel_weights: np.ndarray = None
    motion: MotionClip = None


_LOADERS = {
    "skeleton": load_skeleton,
    "mesh": load_obj,
    "splat": load_ply,
    "weights": load_weights,
    "motion": load_motion,
}


def load_bundle(path, require=()) -> AssetBundle:
    """Read a bundle JSON {skeleton, mesh, splat, weights, motion} of paths
    (relative to the bundle file), load what is present, and cross-check
    bone counts. Any missing or unparseable file exits 2."""
    path = Path(path)
    try:
        spec = json.loads(path.read_text())
    except FileNotFoundError:
        _fail(2, f"bundle file not found: {path}")
    except json.JSONDecodeError as exc:
        _fail(2, f"bundle {path} is not valid JSON: {exc}")
    if not isinstance(spec, dict):
        _fail(2, f"bundle {path} must be a JSON object of paths")

    for key in require:
        if not spec.get(key):
            _fail(2, f"bundle {path} is missing required entry '{key}'")

    loaded = {}
    for key, loader in _LOADERS.items():
        rel = spec.get(key)
        if not rel:
            continue
        file_path = Path(rel)
        if not file_path.is_absolute():
            file_path = path.parent / file_path
        if not file_path.exists():
            _fail(2, f"bundle entry '{key}': file not found: {file_path}")
        try:
            loaded[key] = loader(file_path)
        except Exception as exc:
            _fail(2, f"bundle entry '{key}': failed to parse {file_path}: {exc}")

    skeleton = loaded.get("skeleton")
    weights = loaded.get("weights")
    cloud = loaded.get("splat")
    mesh = loaded.get("mesh")
    motion = loaded.get("motion")

    if skeleton is not None and weights is not None:
        if weights.shape[1] != skeleton.bone_count:
            _fail(2, f"weights cover {weights.shape[1]} bones, skeleton has "
                     f"{skeleton.bone_count}")
    if skeleton is not None and motion is not None:
        try:
            motion.validate(skeleton)
        except ValueError as exc:
            _fail(2, f"motion clip inconsistent with skeleton: {exc}")

    kernel_weights = weights
    if weights is not None and cloud is not None:
        p = cloud.centers.shape[0]
        if weights.shape[0] != p:
            if mesh is not None and weights.shape[0] == mesh.vertices.shape[0]:
                kernel_weights = transfer_to_kernels(
                    SkinWeights(matrix=weights), mesh, cloud.centers)
            else:
                _fail(2, f"weights rows ({weights.shape[0]}) match neither the "
                         f"splat kernels ({p}) nor the guide mesh")

    return AssetBundle(skeleton=skeleton, cloud=cloud, mesh=mesh,
                       kernel_weights=kernel_weights, motion=motion)


# ---------------------------------------------------------------- cameras

def _look_at(eye, target, up=(0.0, 1.0, 0.0)):
    eye = np.asarray(eye, dtype=np.float64)
    forward = np.asarray(target, dtype=np.float64) - eye
    norm = np.linalg.norm(forward)
    if norm < 1e-12:
        _fail(2, "camera eye and target coincide")
    forward = forward / norm
    right = np.cross(forward, np.asarray(up, dtype=np.float64))
    norm = np.linalg.norm(right)
    if norm < 1e-12:
        right = np.cross(forward, np.array([0.0, 0.0, 1.0]))
        norm = np.linalg.norm(right)
    right = right / norm
    down = np.cross(forward, right)
    rot = np.stack([right, down, forward])
    return RigidTransform(rot, -rot @ eye)


def _resolve_camera(camera_path, cloud, resolution):
    """Camera from a JSON override file, completed by an auto-framing of
    the rest cloud (eye pulled back along +z to fit the asset)."""
    lo = cloud.centers.min(axis=0)
    hi = cloud.centers.max(axis=0)
    center = 0.5 * (lo + hi)
    extent = float(max(np.max(hi - lo), 1e-3))
    spec = {}
    if camera_path is not None:
        try:
            spec = json.loads(Path(camera_path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            _fail(2, f"camera config {camera_path}: {exc}")
        if not isinstance(spec, dict):
            _fail(2, f"camera config {camera_path} must be a JSON object")

    width = int(spec.get("width", resolution))
    height = int(spec.get("height", resolution))
    focal = 2.0 * min(width, height)
    eye = spec.get("eye", center + np.array([0.0, 0.35 * extent, 2.8 * extent]))
    target = spec.get("target", center)
    up = spec.get("up", (0.0, 1.0, 0.0))
    return Camera(
        fx=float(spec.get("fx", focal)),
        fy=float(spec.get("fy", focal)),
        cx=float(spec.get("cx", width / 2.0)),
        cy=float(spec.get("cy", height / 2.0)),
        width=width,
        height=height,
        extrinsics=_look_at(eye, target, up),
    )


# ---------------------------------------------------------------- configs

def _merge_config(cls, config_path, overrides, nested=()):
    """Dataclass from an optional JSON file plus flag overrides (flags win).
    Unknown keys and invalid values are usage errors."""
    data = {}
    if config_path is not None:
        try:
            data = json.loads(Path(config_path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            _fail(2, f"config {config_path}: {exc}")
        if not isinstance(data, dict):
            _fail(2, f"config {config_path} must be a JSON object")
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(data) - known)
        if unknown:
            _fail(2, f"config {config_path}: unknown fields {unknown}")
    data.update({k: v for k, v in overrides.items() if v is not None})
    for key, sub_cls in nested:
        if isinstance(data.get(key), dict):
            try:
                data[key] = sub_cls(**data[key])
            except (TypeError, ValueError) as exc:
                _fail(2, f"config field '{key}': {exc}")
    try:
        return cls(**data)
    except (TypeError, ValueError) as exc:
        _fail(2, f"invalid configuration: {exc}")


def _resolve_provider(spec, prompt_unused=None):
    """Builtin mock by name, or host:port of a wire-protocol server."""
    if ":" in spec:
        host, _, port = spec.rpartition(":")
        if host and port.isdigit():
            return RemoteProvider(host, int(port))
        _fail(2, f"invalid provider address '{spec}' (expected host:port)")
    if spec == "oracle":
        return LocalProvider(OraclePredictor(CosineSchedule()))
    if spec == "zero":
        return LocalProvider(ZeroPredictor())
    _fail(2, f"unknown provider '{spec}' (builtin mocks: oracle, zero; "
             "or a host:port address)")


def _write_png(image, path):
    arr = (np.clip(np.asarray(image, dtype=np.float64), 0.0, 1.0) * 255.0)
    Image.fromarray(np.round(arr).astype(np.uint8), "RGB").save(path)


def _motion_arrays(motion, skeleton):
    if motion is not None:
        return (np.asarray(motion.root_rotations, dtype=np.float64),
                np.asarray(motion.root_translations, dtype=np.float64),
                np.asarray(motion.joint_angles, dtype=np.float64))
    j = max(skeleton.bone_count - 1, 0)
    return (np.eye(3)[None], np.zeros((1, 3)), np.zeros((1, j, 3)))


# ---------------------------------------------------------------- commands

@click.group()
def main():
    """Motion synthesis and physics tracking for Gaussian-splat assets."""


@main.command("skin")
@click.argument("mesh_path", type=click.Path(exists=True, dir_okay=False))
@click.argument("skeleton_path", type=click.Path(exists=True, dir_okay=False))
@click.argument("out", type=click.Path(dir_okay=False))
@click.option("--screen", type=float, default=1.0, show_default=True,
              help="screening constant of the diffusion solve")
@click.option("--seed", type=int, default=0, help="accepted for uniformity; the solve is deterministic")
def cmd_skin(mesh_path, skeleton_path, out, screen, seed):
    """Solve skinning weights for a guide mesh against a skeleton."""
    try:
        mesh = load_obj(mesh_path)
    except Exception as exc:
        _fail(2, f"failed to parse mesh {mesh_path}: {exc}")
    try:
        skeleton = load_skeleton(skeleton_path)
    except Exception as exc:
        _fail(2, f"failed to parse skeleton {skeleton_path}: {exc}")

    rest = forward_kinematics(skeleton, RigidTransform.identity(),
                              np.zeros((max(skeleton.bone_count - 1, 0), 3)))
    visibility, distances = bone_visibility(mesh, skeleton, rest)
    try:
        weights = solve_weights(mesh, cotangent_laplacian(mesh),
                                visibility, distances, c=screen)
    except ValueError as exc:
        _fail(2, str(exc))
    save_weights(weights, out)

    mass = weights.matrix.sum(axis=0)
    total = mass.sum()
    click.echo(f"skinned {mesh.vertices.shape[0]} vertices against "
               f"{skeleton.bone_count} bones -> {out}")
    for b in range(skeleton.bone_count):
        click.echo(f"  bone {b}: weight mass {mass[b]:10.3f} ({mass[b] / total:6.1%})")


@main.command("render")
@click.argument("bundle_path", type=click.Path(exists=True, dir_okay=False))
@click.argument("out_dir", type=click.Path(file_okay=False))
@click.option("--motion", "motion_path", type=click.Path(exists=True, dir_okay=False),
              default=None, help="motion clip overriding the bundle's")
@click.option("--camera", "camera_path", type=click.Path(exists=True, dir_okay=False),
              default=None, help="camera JSON (eye/target/up/intrinsics)")
@click.option("--resolution", type=int, default=256, show_default=True)
@click.option("--ground/--no-ground", default=True, show_default=True,
              help="composite the checkerboard ground plane")
@click.option("--seed", type=int, default=0, help="accepted for uniformity; rendering is deterministic")
def cmd_render(bundle_path, out_dir, motion_path, camera_path, resolution, ground, seed):
    """Render a motion clip (or the rest pose) to PNG frames."""
    bundle = load_bundle(bundle_path, require=("skeleton", "splat", "weights"))
    motion = bundle.motion
    if motion_path is not None:
        try:
            motion = load_motion(motion_path)
            motion.validate(bundle.skeleton)
        except Exception as exc:
            _fail(2, f"motion clip {motion_path}: {exc}")

    root_r, root_t, angles = _motion_arrays(motion, bundle.skeleton)
    camera = _resolve_camera(camera_path, bundle.cloud, resolution)
    chain = RenderChain(bundle.skeleton, bundle.cloud, bundle.kernel_weights,
                        GroundConfig() if ground else None)
    frames = root_r.shape[0]
    try:
        video = chain.forward(root_r, root_t, angles, [camera] * frames)
    except (ValueError, RuntimeError) as exc:
        _fail(1, f"render failed: {exc}")

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for f in range(frames):
        _write_png(video[f], out / f"frame_{f:04d}.png")
    click.echo(f"wrote {frames} frame{'s' if frames != 1 else ''} to {out}")


@main.command("distill")
@click.argument("bundle_path", type=click.Path(exists=True, dir_okay=False))
@click.argument("out_motion", type=click.Path(dir_okay=False))
@click.option("--provider", default="oracle", show_default=True,
              help="builtin mock (oracle|zero) or host:port of a guidance server")
@click.option("--config", "config_path", type=click.Path(exists=True, dir_okay=False),
              default=None, help="JSON file mirroring the distillation config fields")
@click.option("--iterations", type=int, default=None)
@click.option("--frames", type=int, default=None)
@click.option("--resolution", type=int, default=None)
@click.option("--seed", type=int, default=None)
@click.option("--prompt", type=str, default=None)
@click.option("--cfg-scale", type=float, default=None)
@click.option("--lambda-smooth", type=float, default=None,
              help="temporal smoothness weight")
@click.option("--lambda-ground", type=float, default=None,
              help="ground non-penetration weight")
@click.option("--velocity", type=float, default=None,
              help="forward drift of the initial clip, m/s")
@click.option("--camera", "camera_path", type=click.Path(exists=True, dir_okay=False),
              default=None)
@click.option("--ground/--no-ground", default=False, show_default=True,
              help="composite the ground plane into guidance renders")
@click.option("--metrics", "metrics_path", type=click.Path(dir_okay=False), default=None,
              help="newline-delimited JSON metrics log")
@click.option("--checkpoint", "checkpoint_path", type=click.Path(dir_okay=False),
              default=None, help="optimizer state file for resuming")
@click.option("--resume", is_flag=True, help="continue from the checkpoint")
def cmd_distill(bundle_path, out_motion, provider, config_path, iterations, frames,
                resolution, seed, prompt, cfg_scale, lambda_smooth, lambda_ground,
                velocity, camera_path, ground, metrics_path, checkpoint_path, resume):
    """Distill a motion clip from a guidance provider."""
    bundle = load_bundle(bundle_path, require=("skeleton", "splat", "weights"))
    config = _merge_config(DistillConfig, config_path, {
        "iterations": iterations,
        "frames": frames,
        "resolution": resolution,
        "seed": seed,
        "prompt": prompt,
        "cfg_scale": cfg_scale,
        "lambda_smooth": lambda_smooth,
        "lambda_ground": lambda_ground,
        "velocity": velocity,
    })
    if resume and checkpoint_path is None:
        _fail(2, "--resume needs --checkpoint")
    gradient_provider = _resolve_provider(provider)
    camera = _resolve_camera(camera_path, bundle.cloud, config.resolution)

    try:
        with gradient_provider:
            result = distill(
                bundle.skeleton, bundle.cloud, bundle.kernel_weights,
                gradient_provider, config,
                base_camera=camera,
                ground=GroundConfig() if ground else None,
                initial=bundle.motion,
                metrics_path=metrics_path,
                checkpoint_path=checkpoint_path,
                resume=resume,
            )
    except FileNotFoundError as exc:
        _fail(2, str(exc))
    except (ProviderError, RuntimeError, ValueError, OSError) as exc:
        _fail(1, f"distillation failed: {exc}")

    save_motion(result.motion, out_motion)
    last = result.metrics[-1] if result.metrics else {}
    click.echo(f"distilled {result.motion.frame_count} frames in "
               f"{len(result.metrics)} iterations -> {out_motion}")
    if last:
        click.echo(f"  final l_smooth {last['l_smooth']:.6g}  "
                   f"l_ground {last['l_ground']:.6g}")


@main.command("track")
@click.argument("bundle_path", type=click.Path(exists=True, dir_okay=False))
@click.argument("out_motion", type=click.Path(dir_okay=False))
@click.option("--config", "config_path", type=click.Path(exists=True, dir_okay=False),
              default=None, help="JSON file mirroring the tracking config fields")
@click.option("--iterations", type=int, default=None)
@click.option("--lambda-smooth", type=float, default=None,
              help="PD-target regularizer weight")
@click.option("--metrics", "metrics_path", type=click.Path(dir_okay=False), default=None)
@click.option("--diagnostics", "diagnostics_path", type=click.Path(dir_okay=False),
              default=None, help="per-frame CSV (time, energy, penetration)")
@click.option("--seed", type=int, default=0, help="accepted for uniformity; tracking is deterministic")
def cmd_track(bundle_path, out_motion, config_path, iterations, lambda_smooth,
              metrics_path, diagnostics_path, seed):
    """Project a motion clip onto a physically valid trajectory."""
    bundle = load_bundle(bundle_path, require=("skeleton", "motion"))
    config = _merge_config(TrackConfig, config_path, {
        "iterations": iterations,
        "lambda_smooth": lambda_smooth,
    }, nested=(("sim", SimConfig),))

    try:
        result = track(bundle.motion, bundle.skeleton, config,
                       metrics_path=metrics_path)
    except (RuntimeError, ValueError) as exc:
        _fail(1, f"tracking failed: {exc}")

    model = build_model(bundle.skeleton)
    tracked = trajectory_to_motion(result.states, bundle.skeleton, model, config.sim)
    save_motion(tracked, out_motion)
    if diagnostics_path is not None:
        export_diagnostics(diagnostics_path, result.states, model, config.sim)
    worst = max(max_penetration(s, model) for s in result.states)
    click.echo(f"tracked {tracked.frame_count} frames in {config.iterations} "
               f"iterations -> {out_motion}")
    click.echo(f"  max penetration {worst:.6g} m")


@main.command("simulate")
@click.argument("bundle_path", type=click.Path(exists=True, dir_okay=False))
@click.argument("out_csv", type=click.Path(dir_okay=False))
@click.option("--frames", type=int, default=None,
              help="frames to roll out (default: motion length, else 25)")
@click.option("--passive", is_flag=True,
              help="no PD drive even when the bundle has a motion clip")
@click.option("--config", "config_path", type=click.Path(exists=True, dir_okay=False),
              default=None, help="JSON file mirroring the simulator config fields")
@click.option("--out-motion", type=click.Path(dir_okay=False), default=None,
              help="also write the simulated trajectory as a motion clip")
@click.option("--seed", type=int, default=0, help="accepted for uniformity; the rollout is deterministic")
def cmd_simulate(bundle_path, out_csv, frames, passive, config_path, out_motion, seed):
    """Roll the simulator forward and write per-frame diagnostics."""
    bundle = load_bundle(bundle_path, require=("skeleton",))
    config = _merge_config(SimConfig, config_path, {})

    motion = bundle.motion
    targets = None
    if motion is not None and not passive:
        targets = np.asarray(motion.joint_angles, dtype=np.float64)
    if frames is None:
        frames = motion.frame_count if motion is not None else 25
    if frames < 1:
        _fail(2, "--frames must be >= 1")
    if targets is not None and frames > targets.shape[0]:
        _fail(2, f"--frames {frames} exceeds the motion clip "
                 f"({targets.shape[0]} frames)")

    root_r, root_t, angles = _motion_arrays(motion, bundle.skeleton)
    world_r, world_t = fk_arrays(bundle.skeleton, root_r[0], root_t[0], angles[0])
    initial = project_initial(world_r, world_t, bundle.skeleton)
    model = build_model(bundle.skeleton)
    try:
        states = rollout(initial, model, config, targets=targets, frames=frames)
    except RuntimeError as exc:
        _fail(1, f"simulation failed: {exc}")

    export_diagnostics(out_csv, states, model, config)
    if out_motion is not None:
        save_motion(trajectory_to_motion(states, bundle.skeleton, model, config),
                    out_motion)
    worst = max(max_penetration(s, model) for s in states)
    click.echo(f"simulated {frames} frames "
               f"({(frames - 1) * config.substeps_per_frame} substeps) -> {out_csv}")
    click.echo(f"  max penetration {worst:.6g} m")


if __name__ == "__main__":
    main()
