# /modules/tcd_forecast/cli_app.py - RUN ORCHESTRATION
# One function per CLI subcommand. Each takes a validated RunConfig, does its
# work through the library modules and records its stages in the run's
# flight recorder (Stream B of LoggerService).

import os
import json
import hashlib
import logging
from contextlib import contextmanager

import numpy as np

from . import config as CFG
from .cascade_pipeline import DiffusionBlock, parse_pipeline_spec, preprocess_repair
from .errors import ConfigError, StructuralError, TCDError
from .metrics_eval import evaluate, prepare_test_set
from .report_generator import generate_html_report, render_table, write_json_report
from .sequence_core import (AvailabilityMask, PoseSequence, SkeletonSpec, ROLE_FULL, apply_mask,
                            generate_synthetic_motion, make_mask, sample_gait_params)
from .sequence_io import read_corpus, read_sequence, write_sequence
from .trainer import load_checkpoint, save_checkpoint, train
from .utils import derive_seed

logger = logging.getLogger('tcd_system.cli')


def make_run_id(command, run_cfg, /, **args) -> str:
    """<command>-<12 hex chars of sha256(config + args)>; same inputs, same id."""
    doc = {"config": run_cfg.model_dump(mode="json"), "args": {k: args[k] for k in sorted(args)}}
    digest = hashlib.sha256(json.dumps(doc, sort_keys=True, default=str).encode('utf-8')).hexdigest()
    return f"{command}-{digest[:12]}"


def _run_log(service, run_id, message, stage="ORCHESTRATOR", level="INFO"):
    logger.info(f"[{run_id}] {message}")
    if service is not None and run_id:
        service.log_run(run_id, level, message, stage=stage)


@contextmanager
def _attributed(path):
    """Errors raised without a path are charged to the input this step was working on."""
    try:
        yield
    except TCDError as e:
        if e.path is None:
            e.path = str(path)
        raise


def _corpus_sequences(directory):
    return [seq for seq, _ in read_corpus(directory)]


def _observed_mask(X: PoseSequence, mask, O):
    """The stored mask, or a fully observed O-frame window when the file carries none."""
    if mask is not None:
        return mask
    return AvailabilityMask.observed_window(X.frames, X.joints, min(O, X.frames))


def _roles_needed(spec):
    text = spec.strip()
    roles = []
    if text.startswith("pre+"):
        roles.append("pre")
        text = text[len("pre+"):]
    if text.endswith("+refine"):
        roles.append("refine")
        text = text[:-len("+refine")]
    roles += {"tcd": ["short", "long"], "single": ["single"]}.get(text, [])
    return roles


def load_blocks(run_cfg, spec) -> dict:
    """DiffusionBlocks for the checkpoint roles a pipeline string uses."""
    blocks = {}
    paths = run_cfg.cascade.checkpoints
    for role in _roles_needed(spec):
        path = getattr(paths, role)
        if path is None:
            raise ConfigError(f"Pipeline '{spec}' needs a '{role}' checkpoint", path=f"cascade.checkpoints.{role}")
        blocks[role] = DiffusionBlock.from_path(path)
    return blocks


# ==========================================
# --- SUBCOMMANDS ---
# ==========================================

def cmd_synth(run_cfg, out_dir=None, service=None, run_id=None) -> dict:
    """Writes the synthetic gait corpus as <out_dir>/train and <out_dir>/test PSEQ1 files."""
    data = run_cfg.data
    seed = run_cfg.section_seed("data")
    skeleton = SkeletonSpec.default()
    frames = data.O + data.P
    splits = {"train": (data.n_train, data.train_dir), "test": (data.n_test, data.test_dir)}
    if out_dir is not None:
        splits = {name: (count, os.path.join(out_dir, name)) for name, (count, _) in splits.items()}

    written = {}
    for split, (count, directory) in splits.items():
        _run_log(service, run_id, f"Synthesizing {count} {split} sequences into {directory}", stage="SYNTH")
        os.makedirs(directory, exist_ok=True)
        for i in range(count):
            gait = sample_gait_params(derive_seed(seed, split, "gait", i), static=data.static)
            X = generate_synthetic_motion(skeleton, gait, frames, data.fps, derive_seed(seed, split, "motion", i),
                                          observation_len=data.O)
            write_sequence(os.path.join(directory, f"seq_{i:05d}{CFG.PSEQ_EXTENSION}"), X)
        written[split] = directory
    return written


def cmd_mask(run_cfg, in_path, out_path, seed=None, service=None, run_id=None) -> str:
    """Draws an occlusion mask for a full sequence and stores the corrupted sequence with it."""
    X, _ = read_sequence(in_path)
    O = X.observation_len if X.observation_len is not None else run_cfg.data.O
    if X.frames < O:
        raise StructuralError(f"Sequence has {X.frames} frames, fewer than O={O}", path=in_path)
    seed = run_cfg.section_seed("mask") if seed is None else seed
    pattern = run_cfg.mask.to_pattern()
    with _attributed(in_path):
        mask = make_mask(pattern, O, X.frames - O, X.skeleton or SkeletonSpec.default(), seed)
        corrupted = apply_mask(X.with_coords(X.coords, observation_len=O), mask, pattern.noise_std,
                               derive_seed(seed, "apply"))
    write_sequence(out_path, corrupted, mask)
    _run_log(service, run_id, f"Pattern '{pattern.kind}' hid {mask.missing_count() // 3} joint entries; "
                              f"wrote {out_path}", stage="MASK")
    return out_path


def cmd_train(run_cfg, role, out_checkpoint, train_dir=None, resume=None, service=None, run_id=None):
    """Trains one block role on the training corpus and saves its checkpoint."""
    dataset = _corpus_sequences(train_dir or run_cfg.data.train_dir)
    train_cfg = run_cfg.train_config(role)
    frames, _ = train_cfg.canvas
    denoiser_cfg = run_cfg.denoiser.to_core(frames, dataset[0].joints if dataset else len(CFG.JOINT_NAMES),
                                            run_cfg.schedule.T, refine=role == "refine")
    resume_ck = load_checkpoint(resume) if resume is not None else None
    _run_log(service, run_id, f"Training '{role}' block: {len(dataset)} sequences, {train_cfg.epochs} epochs, "
                              f"canvas {frames} frames", stage="TRAIN")

    def on_epoch(epoch, loss):
        _run_log(service, run_id, f"epoch {epoch}/{train_cfg.epochs} loss {loss:.6f}", stage="TRAIN")

    with _attributed(train_dir or run_cfg.data.train_dir):
        ck = train(dataset, train_cfg, denoiser_cfg, resume=resume_ck, on_epoch=on_epoch)
    save_checkpoint(ck, out_checkpoint)
    _run_log(service, run_id, f"Checkpoint saved: {out_checkpoint}", stage="TRAIN")
    return ck


def cmd_sample(run_cfg, in_path, out_dir, n_samples=None, seed=None, pipeline=None, service=None, run_id=None):
    """
    Runs a forecasting pipeline on one observation and writes one (O+P)-frame
    PSEQ1 per sample: repaired (or given) observation followed by the forecast.
    """
    spec = pipeline or run_cfg.eval.pipeline
    O, P = run_cfg.cascade.O, run_cfg.cascade.P
    seed = run_cfg.section_seed("cascade") if seed is None else seed

    X, mask = read_sequence(in_path)
    if X.frames < O:
        raise StructuralError(f"Observation has {X.frames} frames, needs O={O}", path=in_path)
    forecast = parse_pipeline_spec(spec, load_blocks(run_cfg, spec), run_cfg.cascade_config())
    n_samples = run_cfg.sample_count(forecast.stochastic) if n_samples is None else n_samples
    _run_log(service, run_id, f"Sampling {n_samples} forecasts with '{spec}' from {in_path}", stage="SAMPLE")
    with _attributed(in_path):
        result = forecast.run(X, _observed_mask(X, mask, O), seed, n_samples)

    observation = result.repaired if result.repaired is not None else np.asarray(X.coords[:O])
    os.makedirs(out_dir, exist_ok=True)
    paths = []
    for k, future in enumerate(result.samples):
        full = PoseSequence(np.concatenate([observation, future]), fps=X.fps, role_tag=ROLE_FULL,
                            observation_len=O, skeleton=X.skeleton)
        path = os.path.join(out_dir, f"sample_{k:03d}{CFG.PSEQ_EXTENSION}")
        write_sequence(path, full)
        paths.append(path)
    _run_log(service, run_id, f"Wrote {len(paths)} samples to {out_dir}", stage="SAMPLE")
    return paths


def cmd_repair(run_cfg, in_path, out_path, pre_checkpoint=None, seed=None, service=None, run_id=None):
    """Imputes the occluded joints of an observation with the pre block."""
    path = pre_checkpoint or run_cfg.cascade.checkpoints.pre
    if path is None:
        raise ConfigError("Repair needs a 'pre' checkpoint", path="cascade.checkpoints.pre")
    block = DiffusionBlock.from_path(path)
    O = run_cfg.cascade.O
    seed = run_cfg.section_seed("cascade") if seed is None else seed

    X, mask = read_sequence(in_path)
    if X.frames < O:
        raise StructuralError(f"Observation has {X.frames} frames, needs O={O}", path=in_path)
    with _attributed(in_path):
        mask = _observed_mask(X, mask, O)
        obs_mask = mask.observation() if mask.frames != mask.observation_len else mask
        observation = X.observation(obs_mask.observation_len)
        repaired = preprocess_repair(observation, obs_mask, block, seed)
    write_sequence(out_path, repaired)
    _run_log(service, run_id, f"Repaired {obs_mask.missing_count() // 3} joint entries; wrote {out_path}",
             stage="REPAIR")
    return out_path


def cmd_evaluate(run_cfg, report_path, test_dir=None, pipeline=None, title=None, service=None, run_id=None):
    """
    Evaluates a pipeline on the test corpus under the configured regime and
    writes the JSON report plus its .txt table and .html page next to it.
    """
    spec = pipeline or run_cfg.eval.pipeline
    O, P = run_cfg.cascade.O, run_cfg.cascade.P
    regime = run_cfg.eval_regime()
    forecast = parse_pipeline_spec(spec, load_blocks(run_cfg, spec), run_cfg.cascade_config())
    protocol = run_cfg.eval_protocol(forecast.stochastic)

    sequences = _corpus_sequences(test_dir or run_cfg.data.test_dir)
    test_set = prepare_test_set(sequences, regime.to_pattern(), O, P, derive_seed(protocol.seed, "regime"))
    _run_log(service, run_id, f"Evaluating '{spec}' on {len(test_set)} sequences, regime '{regime.kind}', "
                              f"best-of-{protocol.n_samples}", stage="EVALUATE")

    with _attributed(test_dir or run_cfg.data.test_dir):
        report = evaluate(forecast, test_set, protocol, regime=regime.descriptor())
    title = title or f"TCD evaluation: {spec}"
    stem, _ = os.path.splitext(report_path)
    write_json_report(report, report_path)
    table = render_table(report, title=title)
    with open(stem + ".txt", 'w', encoding='utf-8') as f:
        f.write(table)
    generate_html_report(report, stem + ".html", title=title)
    _run_log(service, run_id, f"Report written: {report_path} (ADE {report.value('ADE'):.2f} mm)",
             stage="REPORT_GEN")
    return report, table
