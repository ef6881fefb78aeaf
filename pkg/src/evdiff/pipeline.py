"""Command orchestration: artifacts, manifests, and the run() dispatcher.

Every command reads its inputs either from explicit `io.*` config overrides
or from conventional locations under the output directory, writes its
artifacts there, and finishes by writing a RunManifest
(`manifest-<command>.json`) holding the full config echo, the seed, and
sha256 hashes of every input and output file. Re-running a command from its
manifest reproduces the output bytes.

Wall-clock timings live only in the manifest's `timings` section (and the
sweep command's separate timing CSV); they are not part of the reproducible
artifact set.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import time
from pathlib import Path

import numpy as np

from . import __version__
from .arraystore import FORMAT_VERSION as ARRAY_FORMAT_VERSION
from .arraystore import load_arrays, save_arrays
from .checkpoint import DENOISER_TAG, PREDICTOR_TAG, load_denoiser, load_predictor, save_model
from .config import CONFIG_VERSION, PipelineConfig, parse_config, serialize_config
from .denoiser import NoisePredictor, init_parameters
from .diffusion import sample_sequence
from .errors import MissingArtifactError, ValidationError
from .events import (
    EventWindow,
    FrameSequence,
    SensorGeometry,
    VoxelGrid,
    aggregate_voxel,
    build_voxel_grid,
    load_frame_dir,
    read_evt1,
    save_frame_dir,
    segment_by_density,
    simulate_events,
    write_evt1,
)
from .metrics import MetricReport, evaluate_sequence
from .predictor import train_predictor
from .rng import RngState
from .scenes import make_scene
from .schedule import make_schedule, save_schedule, strided_schedule
from .spectral import export_grayscale, fft_magnitude_spectrum, highfreq_event_similarity, split_frequency
from .training import train_diffusion_model

COMMANDS = (
    "simulate",
    "voxelize",
    "train-predictor",
    "train-diffusion",
    "sample",
    "eval",
    "ablate",
    "spectra",
    "sweep-steps",
)

MANIFEST_FORMAT = 1

# Strategy rows of the ablation table: the event-off variant also drops the
# recurrent accumulation (there is nothing left to accumulate).
ABLATION_ROWS = (
    ("no_residual", {"residual": False, "recurrent": True, "cross_att": True, "event": True}),
    ("no_recurrent", {"residual": True, "recurrent": False, "cross_att": True, "event": True}),
    ("no_cross_att", {"residual": True, "recurrent": True, "cross_att": False, "event": True}),
    ("no_event", {"residual": True, "recurrent": False, "cross_att": True, "event": False}),
    ("full", {"residual": True, "recurrent": True, "cross_att": True, "event": True}),
)


@dataclasses.dataclass
class RunManifest:
    command: str
    seed: int
    config_text: str
    versions: dict
    inputs: dict[str, str]
    outputs: dict[str, str]
    timings: dict[str, float]

    def to_json(self) -> str:
        return json.dumps(dataclasses.asdict(self), sort_keys=True, indent=2) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "RunManifest":
        return cls(**json.loads(text))

    def save(self, path: str | Path):
        Path(path).write_text(self.to_json())

    @classmethod
    def load(cls, path: str | Path) -> "RunManifest":
        path = Path(path)
        if not path.exists():
            raise MissingArtifactError(f"manifest not found: {path}")
        return cls.from_json(path.read_text())


def _sha256(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for block in iter(lambda: f.read(65536), b""):
            h.update(block)
    return h.hexdigest()


def _hash_tree(paths: list[Path], base: Path | None = None) -> dict[str, str]:
    # Manifests hold wall-clock timings and are metadata, not artifacts;
    # they are excluded so output hashes stay reproducible.
    out = {}
    for p in paths:
        files = sorted(q for q in p.rglob("*") if q.is_file()) if p.is_dir() else [p]
        for f in files:
            if f.name.startswith("manifest-") and f.suffix == ".json":
                continue
            key = str(f.relative_to(base)) if base and f.is_relative_to(base) else str(f)
            out[key] = _sha256(f)
    return out


def _resolve(cfg: PipelineConfig, key: str, out: Path, default_name: str, must_exist: bool = True) -> Path:
    override = cfg[key]
    path = Path(override) if override else out / default_name
    if must_exist and not path.exists():
        raise MissingArtifactError(f"required artifact for {key} not found at {path}")
    return path


def _load_voxel_archive(path: Path) -> tuple[list[VoxelGrid], dict]:
    arrays, meta = load_arrays(path, expect_tag="evdiff-voxels")
    geom = SensorGeometry(meta["width"], meta["height"])
    grids = [VoxelGrid(arrays[name], geom) for name in sorted(arrays)]
    return grids, meta


def _save_voxel_archive(path: Path, grids: list[VoxelGrid], meta: dict):
    arrays = {f"voxel_{i:05d}": g.values for i, g in enumerate(grids)}
    save_arrays(path, "evdiff-voxels", arrays, meta)


def _write_loss_csv(path: Path, history: list[float]):
    lines = ["step,loss"]
    lines += [f"{i},{v!r}" for i, v in enumerate(history)]
    path.write_text("\n".join(lines) + "\n")


def _frames_to_sequence(video: np.ndarray, timestamps, geometry) -> FrameSequence:
    return FrameSequence(np.clip(video, 0.0, 1.0), np.asarray(timestamps, dtype=np.float64), geometry)


# ----------------------------------------------------------------------------
# Individual commands. Each returns (input paths, output paths, extra timings).


def _cmd_simulate(cfg: PipelineConfig, out: Path):
    inputs: list[Path] = []
    outputs: list[Path] = []
    if cfg["io.frames"]:
        frames_dir = Path(cfg["io.frames"])
        frames = load_frame_dir(frames_dir)
        inputs.append(frames_dir)
    else:
        frames = make_scene(
            cfg.sensor_geometry(),
            cfg["scene.pattern"],
            cfg["scene.frames"],
            speed=cfg["scene.speed"],
            foreground=cfg["scene.foreground"],
            background=cfg["scene.background"],
            size=cfg["scene.size"],
            fps=cfg["scene.fps"],
            seed=cfg["seed"],
            phase=cfg["scene.phase"],
        )
        frames_dir = out / "frames"
        save_frame_dir(frames_dir, frames)
        outputs.append(frames_dir)
    window = simulate_events(frames, cfg.simulator_config())
    events_path = out / "events.evt1"
    write_evt1(events_path, window)
    outputs.append(events_path)
    return inputs, outputs, {}


def _cmd_voxelize(cfg: PipelineConfig, out: Path):
    events_path = _resolve(cfg, "io.events", out, "events.evt1")
    window = read_evt1(events_path)
    inputs = [events_path]
    bins = cfg["voxel.bins"]
    cap = cfg["voxel.max_density"]

    if cfg["voxel.align"] == "frames":
        frames_dir = _resolve(cfg, "io.frames", out, "frames")
        inputs.append(frames_dir)
        frames = load_frame_dir(frames_dir)
        if frames.geometry != window.geometry:
            raise ValidationError("frame geometry does not match event geometry")
        ts = frames.timestamps
        grids = [build_voxel_grid(EventWindow.empty(window.geometry, ts[0], ts[0]), bins)]
        for t in range(1, len(ts)):
            lo = int(np.searchsorted(window.t, ts[t - 1], side="right"))
            hi = int(np.searchsorted(window.t, ts[t], side="right"))
            sub = window.slice(lo, hi)
            sub.check_density(cap)
            grids.append(build_voxel_grid(sub, bins))
        meta_times = [float(v) for v in ts]
    else:
        windows = segment_by_density(window, max_density=cap)
        grids = [build_voxel_grid(w, bins) for w in windows]
        meta_times = [float(w.t_end) for w in windows]

    voxels_path = out / "voxels.evd"
    _save_voxel_archive(
        voxels_path,
        grids,
        {
            "bins": bins,
            "width": window.geometry.width,
            "height": window.geometry.height,
            "align": cfg["voxel.align"],
            "timestamps": meta_times,
        },
    )
    return inputs, [voxels_path], {}


def _cmd_train_predictor(cfg: PipelineConfig, out: Path):
    voxels_path = _resolve(cfg, "io.voxels", out, "voxels.evd")
    frames_dir = _resolve(cfg, "io.frames", out, "frames")
    voxels, _ = _load_voxel_archive(voxels_path)
    frames = load_frame_dir(frames_dir)
    rng = RngState(cfg["seed"]).spawn("train-predictor")
    model, history = train_predictor(
        [(voxels, frames)],
        cfg.predictor_config(),
        rng,
        iterations=cfg["train.predictor_iterations"],
        learning_rate=cfg["train.predictor_learning_rate"],
        truncation=cfg["train.predictor_truncation"],
        loss_target=cfg["train.predictor_loss_target"],
    )
    ckpt = out / "predictor.ckpt"
    save_model(ckpt, model, PREDICTOR_TAG, cfg.predictor_config())
    loss_csv = out / "predictor_loss.csv"
    _write_loss_csv(loss_csv, history)
    return [voxels_path, frames_dir], [ckpt, loss_csv], {}


def _cmd_train_diffusion(cfg: PipelineConfig, out: Path):
    voxels_path = _resolve(cfg, "io.voxels", out, "voxels.evd")
    frames_dir = _resolve(cfg, "io.frames", out, "frames")
    predictor_path = _resolve(cfg, "io.predictor", out, "predictor.ckpt")
    voxels, _ = _load_voxel_archive(voxels_path)
    frames = load_frame_dir(frames_dir)
    predictor = load_predictor(predictor_path, expect=cfg.predictor_config())

    model = NoisePredictor(cfg.denoiser_config())
    init_parameters(model, RngState(cfg["seed"]).spawn("denoiser-init").seed)
    sched = make_schedule(cfg["schedule.steps"], cfg["schedule.beta_start"], cfg["schedule.beta_end"])
    rng = RngState(cfg["seed"]).spawn("train-diffusion")
    history = train_diffusion_model(
        voxels,
        frames,
        predictor,
        model,
        sched,
        rng,
        iterations=cfg["train.iterations"],
        learning_rate=cfg["train.learning_rate"],
        batch=cfg["train.batch"],
        truncation=cfg["train.truncation"],
        loss_target=cfg["train.loss_target"],
        residual_target=cfg["ablation.residual"],
        event_condition=cfg["ablation.event"],
        carry_state=cfg["ablation.recurrent"],
    )
    ckpt = out / "denoiser.ckpt"
    save_model(ckpt, model, DENOISER_TAG, cfg.denoiser_config())
    loss_csv = out / "diffusion_loss.csv"
    _write_loss_csv(loss_csv, history)
    sched_csv = out / "schedule.csv"
    save_schedule(sched_csv, sched)
    return [voxels_path, frames_dir, predictor_path], [ckpt, loss_csv, sched_csv], {}


def _resolve_ref_frames(cfg: PipelineConfig, out: Path) -> Path:
    if cfg["io.ref_frames"]:
        return _resolve(cfg, "io.ref_frames", out, "frames")
    return _resolve(cfg, "io.frames", out, "frames")


def _run_sampler(cfg: PipelineConfig, voxels, meta, predictor, model, steps: int | None = None):
    sched = make_schedule(cfg["schedule.steps"], cfg["schedule.beta_start"], cfg["schedule.beta_end"])
    wanted = steps if steps is not None else cfg["infer.steps"]
    if wanted:
        sched = strided_schedule(sched, wanted)
    rng = RngState(cfg["seed"]).spawn("sample")
    video = sample_sequence(
        voxels,
        predictor,
        model,
        sched,
        rng,
        start_at_final_step=cfg["infer.start_at_final_step"],
        residual_target=cfg["ablation.residual"],
        event_condition=cfg["ablation.event"],
        carry_state=cfg["ablation.recurrent"],
    )
    return video


def _cmd_sample(cfg: PipelineConfig, out: Path):
    voxels_path = _resolve(cfg, "io.voxels", out, "voxels.evd")
    predictor_path = _resolve(cfg, "io.predictor", out, "predictor.ckpt")
    denoiser_path = _resolve(cfg, "io.denoiser", out, "denoiser.ckpt")
    voxels, meta = _load_voxel_archive(voxels_path)
    predictor = load_predictor(predictor_path, expect=cfg.predictor_config())
    model = load_denoiser(denoiser_path, expect=cfg.denoiser_config())

    t0 = time.perf_counter()
    video = _run_sampler(cfg, voxels, meta, predictor, model)
    elapsed = time.perf_counter() - t0

    samples_dir = out / "samples"
    seq = _frames_to_sequence(video, meta["timestamps"], voxels[0].geometry)
    save_frame_dir(samples_dir, seq)
    return [voxels_path, predictor_path, denoiser_path], [samples_dir], {"sample_seconds": elapsed}


def _cmd_eval(cfg: PipelineConfig, out: Path):
    samples_dir = _resolve(cfg, "io.samples", out, "samples")
    ref_dir = _resolve_ref_frames(cfg, out)
    pred = load_frame_dir(samples_dir)
    ref = load_frame_dir(ref_dir)
    report = evaluate_sequence(pred, ref, equalize=cfg["eval.equalize"])
    metrics_csv = out / "metrics.csv"
    report.save(metrics_csv)
    return [samples_dir, ref_dir], [metrics_csv], {}


def _cmd_ablate(cfg: PipelineConfig, out: Path):
    voxels_path = _resolve(cfg, "io.voxels", out, "voxels.evd")
    frames_dir = _resolve(cfg, "io.frames", out, "frames")
    eval_voxels = Path(cfg["io.eval_voxels"]) if cfg["io.eval_voxels"] else voxels_path
    eval_frames = Path(cfg["io.eval_frames"]) if cfg["io.eval_frames"] else frames_dir
    if not eval_voxels.exists() or not eval_frames.exists():
        raise MissingArtifactError("ablation evaluation artifacts not found")

    inputs = [voxels_path, frames_dir]
    outputs: list[Path] = []
    # One predictor serves every row: the ablation flags only touch the
    # diffusion model and its conditioning.
    predictor_path = Path(cfg["io.predictor"]) if cfg["io.predictor"] else out / "predictor.ckpt"
    if not predictor_path.exists():
        _, sub_out, _ = _cmd_train_predictor(cfg, out)
        outputs += sub_out
    else:
        inputs.append(predictor_path)

    rows = []
    for label, flags in ABLATION_ROWS:
        row_out = out / "ablate" / label
        row_out.mkdir(parents=True, exist_ok=True)
        row_cfg = cfg.with_values(
            {
                "ablation.residual": flags["residual"],
                "ablation.recurrent": flags["recurrent"],
                "ablation.cross_att": flags["cross_att"],
                "ablation.event": flags["event"],
                "io.voxels": str(voxels_path),
                "io.frames": str(frames_dir),
                "io.predictor": str(predictor_path),
            }
        )
        # Full run() per stage so each row directory carries its own manifests.
        run("train-diffusion", row_cfg, row_out)
        sample_cfg = row_cfg.with_values(
            {"io.voxels": str(eval_voxels), "io.denoiser": str(row_out / "denoiser.ckpt")}
        )
        run("sample", sample_cfg, row_out)
        eval_cfg = sample_cfg.with_values(
            {"io.samples": str(row_out / "samples"), "io.ref_frames": str(eval_frames)}
        )
        run("eval", eval_cfg, row_out)
        outputs.append(row_out)

        report = MetricReport.load(row_out / "metrics.csv")
        rows.append((label, flags, report))

    table = out / "ablation.csv"
    lines = ["label,residual,recurrent,cross_att,event,mse,ssim,perceptual"]
    for label, flags, report in rows:
        lines.append(
            f"{label},{int(flags['residual'])},{int(flags['recurrent'])},{int(flags['cross_att'])},"
            f"{int(flags['event'])},{report.mean_mse!r},{report.mean_ssim!r},{report.mean_perceptual!r}"
        )
    table.write_text("\n".join(lines) + "\n")
    outputs.append(table)
    return inputs, outputs, {}


def _cmd_spectra(cfg: PipelineConfig, out: Path):
    frames_dir = _resolve(cfg, "io.frames", out, "frames")
    frames = load_frame_dir(frames_dir)
    inputs = [frames_dir]
    cutoff = cfg["spectral.cutoff"]

    voxels = None
    try:
        voxels_path = _resolve(cfg, "io.voxels", out, "voxels.evd")
        voxels, _ = _load_voxel_archive(voxels_path)
        inputs.append(voxels_path)
    except MissingArtifactError:
        pass

    spectra_dir = out / "spectra"
    spectra_dir.mkdir(parents=True, exist_ok=True)
    for stale in spectra_dir.glob("frame_*"):
        stale.unlink()
    sim_rows = ["frame,highfreq_event_similarity"]
    for i in range(len(frames)):
        img = frames.frames[i]
        low, high = split_frequency(img, cutoff)
        export_grayscale(spectra_dir / f"frame_{i:05d}_image.png", img)
        export_grayscale(spectra_dir / f"frame_{i:05d}_spectrum.png", fft_magnitude_spectrum(img).values)
        export_grayscale(spectra_dir / f"frame_{i:05d}_low.png", low)
        export_grayscale(spectra_dir / f"frame_{i:05d}_high.png", high)
        if voxels is not None and i < len(voxels):
            agg = aggregate_voxel(voxels[i])
            export_grayscale(spectra_dir / f"frame_{i:05d}_events.png", agg)
            sim_rows.append(f"{i},{highfreq_event_similarity(img, agg, cutoff)!r}")
    if voxels is not None:
        (spectra_dir / "similarity.csv").write_text("\n".join(sim_rows) + "\n")
    return inputs, [spectra_dir], {}


def _cmd_sweep_steps(cfg: PipelineConfig, out: Path):
    voxels_path = _resolve(cfg, "io.voxels", out, "voxels.evd")
    predictor_path = _resolve(cfg, "io.predictor", out, "predictor.ckpt")
    denoiser_path = _resolve(cfg, "io.denoiser", out, "denoiser.ckpt")
    try:
        ref_dir = _resolve(cfg, "io.ref_frames", out, "frames")
    except MissingArtifactError:
        ref_dir = _resolve(cfg, "io.frames", out, "frames")
    voxels, meta = _load_voxel_archive(voxels_path)
    ref = load_frame_dir(ref_dir)
    predictor = load_predictor(predictor_path, expect=cfg.predictor_config())
    model = load_denoiser(denoiser_path, expect=cfg.denoiser_config())

    step_counts = sorted(set(cfg["sweep.steps"]), reverse=True)
    rows = ["steps,mse,ssim,perceptual"]
    timing_rows = ["steps,runtime_seconds"]
    timings = {}
    for steps in step_counts:
        if steps > cfg["schedule.steps"]:
            raise ValidationError(f"sweep step count {steps} exceeds schedule.steps {cfg['schedule.steps']}")
        t0 = time.perf_counter()
        video = _run_sampler(cfg, voxels, meta, predictor, model, steps=steps)
        elapsed = time.perf_counter() - t0
        report = evaluate_sequence(video, ref.frames, equalize=cfg["eval.equalize"])
        rows.append(f"{steps},{report.mean_mse!r},{report.mean_ssim!r},{report.mean_perceptual!r}")
        timing_rows.append(f"{steps},{elapsed!r}")
        timings[f"steps_{steps}_seconds"] = elapsed

    sweep_csv = out / "sweep.csv"
    sweep_csv.write_text("\n".join(rows) + "\n")
    # Wall-clock column lives in its own file so sweep.csv stays reproducible.
    timing_csv = out / "sweep_timings.csv"
    timing_csv.write_text("\n".join(timing_rows) + "\n")
    return [voxels_path, predictor_path, denoiser_path, ref_dir], [sweep_csv], timings


_DISPATCH = {
    "simulate": _cmd_simulate,
    "voxelize": _cmd_voxelize,
    "train-predictor": _cmd_train_predictor,
    "train-diffusion": _cmd_train_diffusion,
    "sample": _cmd_sample,
    "eval": _cmd_eval,
    "ablate": _cmd_ablate,
    "spectra": _cmd_spectra,
    "sweep-steps": _cmd_sweep_steps,
}


def run(command: str, cfg: PipelineConfig, out_dir: str | Path) -> RunManifest:
    """Execute one pipeline command and write its manifest."""
    if command not in _DISPATCH:
        raise ValidationError(f"unknown command {command!r}; expected one of {COMMANDS}")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)

    t0 = time.perf_counter()
    inputs, outputs, extra_timings = _DISPATCH[command](cfg, out)
    elapsed = time.perf_counter() - t0

    manifest = RunManifest(
        command=command,
        seed=cfg["seed"],
        config_text=serialize_config(cfg),
        versions={
            "package": __version__,
            "config_format": CONFIG_VERSION,
            "array_format": ARRAY_FORMAT_VERSION,
            "manifest_format": MANIFEST_FORMAT,
        },
        inputs=_hash_tree([Path(p) for p in inputs], base=out),
        outputs=_hash_tree([Path(p) for p in outputs], base=out),
        timings={"total_seconds": elapsed, **extra_timings},
    )
    manifest.save(out / f"manifest-{command}.json")
    return manifest


def replay(manifest_path: str | Path, out_dir: str | Path) -> RunManifest:
    """Re-run a command from its manifest (config echo + seed)."""
    manifest = RunManifest.load(manifest_path)
    cfg = parse_config(manifest.config_text)
    return run(manifest.command, cfg, out_dir)
