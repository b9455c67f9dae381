"""Glue between config, trainer, and artifact export: the run driver.

A run directory is self-describing: the resolved config echo, per-step loss
CSV, periodic metric rows, embeddings, translated-image grids, and binary
checkpoints all land next to each other, written deterministically.
"""

from __future__ import annotations

import dataclasses
import sys
from pathlib import Path
from typing import Optional

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor, no_grad
from .config import DatasetConfig, ExperimentConfig, echo_config
from .data import DataError, Dataset, SyntheticSpec, load_idx, preprocess, synth_domain_pair
from .eval_export import (EMBEDDINGS_HEADER, LOSSES_HEADER, METRICS_HEADER,
                          Checkpoint, domain_probe, eval_report, export_csv,
                          export_image_grid, pca_project, restore_store,
                          restore_train_state, save_checkpoint)
from .losses import LambdaConfig, RoutingRules
from .models import ModelBundle, build_bundle
from .trainer import TrainConfig, TrainState, run_stage_plan


@dataclasses.dataclass
class DomainData:
    src_train: Dataset
    tgt_train: Dataset
    src_test: Dataset
    tgt_test: Dataset


def _split_train_test(ds: Dataset, n_test: int, seed: int) -> tuple[Dataset, Dataset]:
    if n_test >= len(ds):
        raise DataError(f"test split {n_test} >= dataset size {len(ds)}")
    idx = np.random.default_rng([seed, len(ds)]).permutation(len(ds))
    te, tr = idx[:n_test], idx[n_test:]
    take = lambda part: dataclasses.replace(
        ds, images=ds.images[part],
        labels=None if ds.labels is None else ds.labels[part])
    return take(tr), take(te)


def build_datasets(dcfg: DatasetConfig) -> DomainData:
    if dcfg.kind == "idx":
        src = preprocess(load_idx(dcfg.paths["source_images"], dcfg.paths["source_labels"]))
        tgt = preprocess(load_idx(dcfg.paths["target_images"], dcfg.paths["target_labels"]))
        sub = dcfg.paths.get("subsample_train")
        if sub:
            src = dataclasses.replace(src, images=src.images[:sub], labels=src.labels[:sub])
            tgt = dataclasses.replace(tgt, images=tgt.images[:sub], labels=tgt.labels[:sub])
        if "source_test_images" in dcfg.paths:
            src_te = preprocess(load_idx(dcfg.paths["source_test_images"], dcfg.paths["source_test_labels"]))
            tgt_te = preprocess(load_idx(dcfg.paths["target_test_images"], dcfg.paths["target_test_labels"]))
            if dcfg.n_test:
                src_te = dataclasses.replace(src_te, images=src_te.images[:dcfg.n_test],
                                             labels=src_te.labels[:dcfg.n_test])
                tgt_te = dataclasses.replace(tgt_te, images=tgt_te.images[:dcfg.n_test],
                                             labels=tgt_te.labels[:dcfg.n_test])
        else:
            src, src_te = _split_train_test(src, dcfg.n_test, seed=101)
            tgt, tgt_te = _split_train_test(tgt, dcfg.n_test, seed=202)
        k = max(int(src.labels.max()), int(tgt.labels.max() if tgt.labels is not None else 0)) + 1
        for ds, dom in ((src, "source"), (tgt, "target"), (src_te, "source"), (tgt_te, "target")):
            ds.num_classes = k
            ds.domain = dom
        return DomainData(src.validate(True), tgt.validate(True), src_te.validate(True), tgt_te.validate(True))

    spec = dcfg.synth
    src_train, tgt_train = synth_domain_pair(spec)
    test_spec = dataclasses.replace(spec, n_source=dcfg.n_test, n_target=dcfg.n_test,
                                    seed=spec.seed + 7777)
    src_test, tgt_test = synth_domain_pair(test_spec)
    return DomainData(src_train, tgt_train, src_test, tgt_test)


def bundle_for(cfg: ExperimentConfig, num_classes: int) -> ModelBundle:
    return build_bundle(cfg.model.architecture, num_classes=num_classes,
                        seed=cfg.model.seed, critic_norm=cfg.model.critic_norm)


# ---------------------------------------------------------------------------
# evaluation helpers
# ---------------------------------------------------------------------------

def _batched(n: int, size: int = 256):
    for lo in range(0, n, size):
        yield lo, min(lo + size, n)


def predictions(bundle: ModelBundle, ds: Dataset, encoder: str) -> np.ndarray:
    out = np.empty(len(ds), dtype=np.int64)
    enc = bundle.encode_source if encoder == "f_x" else bundle.encode_target
    with no_grad():
        for lo, hi in _batched(len(ds)):
            z = enc(Tensor(ds.images[lo:hi]), train=False)
            out[lo:hi] = np.argmax(bundle.classify(z, train=False).data, axis=1)
    return out


def latents(bundle: ModelBundle, ds: Dataset, encoder: str) -> np.ndarray:
    enc = bundle.encode_source if encoder == "f_x" else bundle.encode_target
    chunks = []
    with no_grad():
        for lo, hi in _batched(len(ds)):
            z = enc(Tensor(ds.images[lo:hi]), train=False)
            chunks.append(z.data.reshape(hi - lo, -1).copy())
    return np.concatenate(chunks)


def evaluate(bundle: ModelBundle, data: DomainData, step: int, losses: Optional[dict] = None):
    probe = domain_probe(latents(bundle, data.src_test, "f_x"),
                         latents(bundle, data.tgt_test, "f_y"), seed=0)
    src_rep = eval_report(predictions(bundle, data.src_test, "f_x"), data.src_test.labels,
                          data.src_test.num_classes, step=step, split="source", probe=probe,
                          losses=losses)
    tgt_rep = eval_report(predictions(bundle, data.tgt_test, "f_y"), data.tgt_test.labels,
                          data.tgt_test.num_classes, step=step, split="target", probe=probe,
                          losses=losses)
    return src_rep, tgt_rep


def translate_images(bundle: ModelBundle, images: np.ndarray, direction: str) -> np.ndarray:
    with no_grad():
        x = Tensor(images)
        if direction == "x2y":
            out = bundle.decode_target(bundle.encode_source(x, train=False), train=False)
        elif direction == "y2x":
            out = bundle.decode_source(bundle.encode_target(x, train=False), train=False)
        elif direction == "identity":
            out = bundle.decode_source(bundle.encode_source(x, train=False), train=False)
        elif direction == "cycle":
            mid = bundle.decode_target(bundle.encode_source(x, train=False), train=False)
            out = bundle.decode_source(bundle.encode_target(mid, train=False), train=False)
        else:
            raise ValueError(f"unknown direction {direction!r}")
    return out.data


def export_embeddings(bundle: ModelBundle, data: DomainData, path) -> None:
    zs = latents(bundle, data.src_test, "f_x")
    zt = latents(bundle, data.tgt_test, "f_y")
    proj = pca_project(np.concatenate([zs, zt]), dims=2)
    rows = []
    for i in range(len(zs)):
        rows.append({"domain": "source", "label": int(data.src_test.labels[i]),
                     "pc1": float(proj[i, 0]), "pc2": float(proj[i, 1])})
    for j in range(len(zt)):
        rows.append({"domain": "target", "label": int(data.tgt_test.labels[j]),
                     "pc1": float(proj[len(zs) + j, 0]), "pc2": float(proj[len(zs) + j, 1])})
    export_csv(rows, path, EMBEDDINGS_HEADER)


# ---------------------------------------------------------------------------
# training driver
# ---------------------------------------------------------------------------

def _checkpoint_meta(cfg: ExperimentConfig, bundle: ModelBundle) -> dict:
    return {
        "arch": bundle.arch,
        "num_classes": bundle.num_classes,
        "critic_norm": bundle.critic_norm,
        "encoders_tied": bundle.encoders_tied,
        "lambda": dataclasses.asdict(cfg.lambdas),
        "config_hash": cfg.config_hash(),
    }


def restore_bundle(ck: Checkpoint) -> ModelBundle:
    meta = ck.meta
    bundle = build_bundle(meta["arch"], num_classes=int(meta["num_classes"]),
                          seed=0, critic_norm=meta.get("critic_norm", "none"))
    bundle.store = restore_store(ck)
    bundle.encoders_tied = bool(meta.get("encoders_tied", True))
    return bundle


def train_run(cfg: ExperimentConfig, log=print) -> dict:
    run_dir = Path(cfg.output.run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    echo_config(cfg, run_dir / "config.yaml")

    data = build_datasets(cfg.dataset)
    classes = data.src_train.num_classes
    bundle = bundle_for(cfg, classes)
    state = TrainState(cfg.trainer.seed)
    meta = _checkpoint_meta(cfg, bundle)

    loss_rows: list[dict] = []
    metric_rows: list[dict] = []

    def write_artifacts():
        export_csv(loss_rows, run_dir / "losses.csv", LOSSES_HEADER)
        export_csv(metric_rows, run_dir / "metrics.csv", METRICS_HEADER)

    def do_eval(step: int, losses: Optional[dict] = None):
        src_rep, tgt_rep = evaluate(bundle, data, step, losses)
        for rep in (src_rep, tgt_rep):
            metric_rows.append({"step": step, "split": rep.split,
                                "accuracy": rep.overall_accuracy,
                                "probe": rep.probe_accuracy})
        log(f"step {step:>6d}  src acc {src_rep.overall_accuracy:.3f}  "
            f"tgt acc {tgt_rep.overall_accuracy:.3f}  probe {tgt_rep.probe_accuracy:.3f}")
        return src_rep, tgt_rep

    grid_src = data.src_test.images[:cfg.output.grid_samples]

    def hook(record: dict):
        loss_rows.append(dict(record))
        step = record["step"] + 1
        if cfg.output.eval_every and step % cfg.output.eval_every == 0 and step < cfg.trainer.total_steps:
            do_eval(step, record)
        if cfg.output.checkpoint_every and step % cfg.output.checkpoint_every == 0:
            save_checkpoint(run_dir / f"ck_{step:07d}.bin", bundle.store, state, meta)
        if cfg.output.grid_every and step % cfg.output.grid_every == 0 and grid_src.ndim == 4:
            export_image_grid(translate_images(bundle, grid_src, "x2y"),
                              run_dir / f"translate_x2y_{step:07d}.pgm")

    def stage_boundary(i: int):
        save_checkpoint(run_dir / f"ck_stage{i}.bin", bundle.store, state, meta)

    initial_src, initial_tgt = do_eval(0)
    tgt_train_unlabeled = data.tgt_train.without_labels()
    run_stage_plan(bundle, cfg.plan, data.src_train, tgt_train_unlabeled, state,
                   cfg.trainer, cfg.routing, hook=hook, stage_boundary_hook=stage_boundary)
    final_src, final_tgt = do_eval(state.step)

    save_checkpoint(run_dir / "final.bin", bundle.store, state, meta)
    write_artifacts()
    export_embeddings(bundle, data, run_dir / "embeddings.csv")
    if data.src_test.images.ndim == 4:
        export_image_grid(translate_images(bundle, grid_src, "x2y"), run_dir / "translate_x2y.pgm")
        export_image_grid(grid_src, run_dir / "source_inputs.pgm")

    return {
        "run_dir": str(run_dir),
        "steps": state.step,
        "initial": {"source_accuracy": initial_src.overall_accuracy,
                    "target_accuracy": initial_tgt.overall_accuracy,
                    "probe": initial_tgt.probe_accuracy},
        "final": {"source_accuracy": final_src.overall_accuracy,
                  "target_accuracy": final_tgt.overall_accuracy,
                  "probe": final_tgt.probe_accuracy},
    }
