"""Pipeline stages over one run directory.

Each stage reads its inputs from the run directory and writes its
outputs back into it, so stages can be rerun independently and the
directory is a complete record of the run:

  config.ini                       effective config echo
  dataset/                         rendered corpus (gen-data)
  checkpoints/mae_<m>.tdck         masked-autoencoder weights per modality
  checkpoints/encoders.tdck        aligned, frozen condition encoders
  checkpoints/diffusion_<m>.tdck   denoiser + control branch per output modality
  logs/*.csv                       training curves (step, loss, lr, walltime)
  logs/retrieval.csv               alignment-stage retrieval table
  samples/                         decoded payloads + condition manifest
  metrics.csv                      evaluation table (metric, conditions, value, seed, n)
  report/                          charts + text summary
  demo/                            contradictory-condition outputs

Every random draw comes from a stage stream derived from the run seed
(see rng.STAGE), so two runs from the same (config, seed) produce
identical artifacts bit for bit; only the walltime column of training
logs differs. metrics.csv contains no timing and is exactly repeatable.
"""

from __future__ import annotations

import json
import time
from pathlib import Path

import numpy as np

from . import tensor as T
from .checkpoint import Checkpoint, load_checkpoint, rng_state_json, save_checkpoint
from .config import RunConfig, config_digest, emit_config
from .control import ControlBranch, init_control_branch
from .data import (MODALITIES, N_BINS, N_FACTORS, Dataset, build_dataset,
                   concept_bins, load_dataset, save_dataset)
from .denoiser import ConditionalDenoiser, default_config
from .diffusion import (TrainItem, ddpm_sample_batch, decode_output,
                        make_schedule, payload_to_latent, training_step)
from .encoders import (AlignmentEncoder, LatentCondition, MaskedAutoencoder,
                       adopt_backbone, align_step, calibrate_whitening,
                       encode_batch, finetune_align_step, mae_pretrain_step,
                       make_encoders, make_log_tau)
from .metrics import (condition_consistency, frechet_distance, probe_accuracy,
                      retrieval_accuracy, text_bin_accuracy, train_probe)
from .optim import Adam
from .rng import philox, stage_rng

CONFIG_NAME = "config.ini"
DATASET_DIR = "dataset"
CKPT_DIR = "checkpoints"
LOG_DIR = "logs"
SAMPLE_DIR = "samples"
REPORT_DIR = "report"
DEMO_DIR = "demo"
METRICS_NAME = "metrics.csv"

# Unimodal sample budget for whitening calibration. More samples change
# the estimate by less than the run-to-run spread; fewer starve it.
WHITEN_SAMPLES = 1000

METRIC_HEADER = ("metric", "conditions", "value", "seed", "n")
TRAIN_LOG_HEADER = ("step", "loss", "lr", "walltime_s")

_PAYLOAD_TAGS = {"image": "<f4", "audio": "<f4", "text": "<i4"}


class PipelineError(RuntimeError):
    """A stage cannot run: missing inputs or an inconsistent run directory."""


# ---------------------------------------------------------------------------
# run directory plumbing
# ---------------------------------------------------------------------------

def _fmt(v) -> str:
    if isinstance(v, float):
        return format(v, ".10g")
    return str(v)


def write_csv(path, header, rows) -> None:
    lines = [",".join(header)]
    for row in rows:
        lines.append(",".join(_fmt(v) for v in row))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def prepare_run_dir(cfg: RunConfig, run_dir, check_config: bool = True) -> Path:
    """Ensure the run directory exists and carries this exact config.

    The first stage writes the effective config echo; later stages verify
    against it, so artifacts inside one directory always belong to one
    (config, seed) pair. Sampling-time overrides bypass the check and are
    recorded in their own manifests instead.
    """
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    echo = emit_config(cfg)
    cfg_path = run_dir / CONFIG_NAME
    if cfg_path.exists():
        if check_config and cfg_path.read_text(encoding="utf-8") != echo:
            raise PipelineError(
                f"run directory {run_dir} was created with a different config; "
                f"use a fresh --out or the original config/seed")
    else:
        cfg_path.write_text(echo, encoding="utf-8")
    return run_dir


def load_run_dataset(run_dir) -> Dataset:
    path = Path(run_dir) / DATASET_DIR
    if not (path / "meta.json").is_file():
        raise PipelineError(f"dataset not found: {path} (run gen-data first)")
    return load_dataset(path)


def _stage_meta(cfg: RunConfig, stage: str, rng, **extra) -> dict:
    meta = {"stage": stage, "seed": cfg.seed, "config_digest": config_digest(cfg)}
    if rng is not None:
        meta["rng_state"] = rng_state_json(rng)
    meta.update(extra)
    return meta


def _encode_matrix(enc: AlignmentEncoder, samples, chunk: int = 64) -> np.ndarray:
    """Frozen-encoder latents for a sample list, (N, d) float64."""
    out = []
    for i in range(0, len(samples), chunk):
        with T.no_grad():
            z = encode_batch(enc, samples[i:i + chunk])
        out.append(z.data.astype(np.float64))
    return np.concatenate(out, axis=0)


# ---------------------------------------------------------------------------
# gen-data
# ---------------------------------------------------------------------------

def stage_gen_data(cfg: RunConfig, run_dir) -> Path:
    """Render the corpus for this run; the dataset seed is the run seed."""
    run_dir = prepare_run_dir(cfg, run_dir)
    ds = build_dataset(cfg.data.n_unimodal, cfg.data.n_paired, cfg.data.n_test,
                       seed=cfg.seed)
    out = run_dir / DATASET_DIR
    save_dataset(ds, out)
    print(f"[gen-data] {len(ds.splits)} concepts -> {out}")
    return out


# ---------------------------------------------------------------------------
# pretrain
# ---------------------------------------------------------------------------

def stage_pretrain(cfg: RunConfig, run_dir) -> dict[str, Path]:
    """Masked-autoencoder pretraining per modality on the unimodal split."""
    run_dir = prepare_run_dir(cfg, run_dir)
    ds = load_run_dataset(run_dir)
    uni = ds.indices("train-unimodal")
    paths: dict[str, Path] = {}
    for modality in MODALITIES:
        t0 = time.perf_counter()
        rng = stage_rng(cfg.seed, f"mae_{modality}")
        mae = MaskedAutoencoder(modality, rng)
        opt = Adam(mae.parameters(), lr=cfg.mae.lr)
        rows = []
        for step in range(1, cfg.mae.steps + 1):
            take = rng.choice(uni, size=min(cfg.mae.batch, len(uni)), replace=False)
            batch = [ds.samples[modality][int(i)] for i in take]
            loss = mae_pretrain_step(mae, batch, cfg.mae.mask_ratio, opt, rng)
            rows.append((step, loss, opt.lr, time.perf_counter() - t0))
        log_dir = run_dir / LOG_DIR
        log_dir.mkdir(exist_ok=True)
        write_csv(log_dir / f"mae_{modality}.csv", TRAIN_LOG_HEADER, rows)
        path = run_dir / CKPT_DIR / f"mae_{modality}.tdck"
        meta = _stage_meta(cfg, "pretrain", rng, modality=modality,
                           steps=cfg.mae.steps, loss_first=rows[0][1],
                           loss_last=rows[-1][1], arch=_encoder_arch())
        save_checkpoint(path, Checkpoint(meta=meta, arrays=mae.state_dict()))
        paths[modality] = path
        print(f"[pretrain] {modality}: loss {rows[0][1]:.4f} -> {rows[-1][1]:.4f} "
              f"({time.perf_counter() - t0:.1f}s)")
    return paths


def _encoder_arch() -> dict:
    from .encoders import LATENT_DIM, MODEL_WIDTH, N_BLOCKS
    return {"latent_dim": LATENT_DIM, "width": MODEL_WIDTH, "blocks": N_BLOCKS}


def _load_mae(run_dir, modality: str) -> MaskedAutoencoder:
    path = Path(run_dir) / CKPT_DIR / f"mae_{modality}.tdck"
    ck = load_checkpoint(path)
    mae = MaskedAutoencoder(modality, philox(0, 0))
    mae.load_state_dict(ck.arrays)
    return mae


# ---------------------------------------------------------------------------
# align
# ---------------------------------------------------------------------------

def stage_align(cfg: RunConfig, run_dir) -> Path:
    """Build the shared condition space.

    Image and text encoders train jointly on the paired split (image warm-
    started from its masked autoencoder, both whitened on unimodal
    features); the text encoder then freezes as the anchor and the audio
    encoder fine-tunes its projection head against it. All three freeze at
    the end and are saved together.
    """
    run_dir = prepare_run_dir(cfg, run_dir)
    ds = load_run_dataset(run_dir)
    paired = ds.indices("train-paired")
    uni = ds.indices("train-unimodal")[:WHITEN_SAMPLES]
    if len(paired) < cfg.align.batch:
        raise PipelineError(
            f"align batch {cfg.align.batch} exceeds paired split {len(paired)}")

    encs = make_encoders(stage_rng(cfg.seed, "init"))
    adopt_backbone(encs["image"], _load_mae(run_dir, "image").encoder)
    for m in ("image", "text"):
        calibrate_whitening(encs[m], [ds.samples[m][int(i)] for i in uni])

    log_dir = run_dir / LOG_DIR
    log_dir.mkdir(exist_ok=True)

    # phase 1: joint image-text contrastive training
    t0 = time.perf_counter()
    rng_joint = stage_rng(cfg.seed, "align_joint")
    log_tau = make_log_tau(cfg.align.tau_init)
    opt = Adam(encs["image"].parameters() + encs["text"].parameters() + [log_tau],
               lr=cfg.align.anchor_lr)
    rows = []
    for step in range(1, cfg.align.anchor_steps + 1):
        take = rng_joint.choice(paired, size=cfg.align.batch, replace=False)
        pairs = [(ds.samples["image"][int(i)], ds.samples["text"][int(i)]) for i in take]
        loss = align_step(encs["image"], encs["text"], pairs, log_tau, opt)
        rows.append((step, loss, opt.lr, time.perf_counter() - t0))
    write_csv(log_dir / "align_joint.csv", TRAIN_LOG_HEADER, rows)
    encs["text"].freeze()

    # phase 2: audio head fine-tune against the frozen text anchor
    t0 = time.perf_counter()
    rng_aud = stage_rng(cfg.seed, "align_audio")
    adopt_backbone(encs["audio"], _load_mae(run_dir, "audio").encoder)
    calibrate_whitening(encs["audio"], [ds.samples["audio"][int(i)] for i in uni])
    log_tau_aud = make_log_tau(cfg.align.tau_init)
    opt_aud = Adam(encs["audio"].proj.parameters() + [log_tau_aud],
                   lr=cfg.align.finetune_lr)
    rows_aud = []
    for step in range(1, cfg.align.finetune_steps + 1):
        take = rng_aud.choice(paired, size=cfg.align.batch, replace=False)
        pairs = [(ds.samples["audio"][int(i)], ds.samples["text"][int(i)]) for i in take]
        loss = finetune_align_step(encs["audio"], encs["text"], pairs, log_tau_aud, opt_aud)
        rows_aud.append((step, loss, opt_aud.lr, time.perf_counter() - t0))
    write_csv(log_dir / "align_audio.csv", TRAIN_LOG_HEADER, rows_aud)

    for enc in encs.values():
        enc.freeze()

    retr = _retrieval_rows(cfg, ds, encs)
    write_csv(log_dir / "retrieval.csv", METRIC_HEADER, retr)

    arrays: dict[str, np.ndarray] = {}
    for m, enc in encs.items():
        for k, v in enc.state_dict().items():
            arrays[f"{m}.{k}"] = v
    arrays["log_tau.joint"] = log_tau.data.reshape(1)
    arrays["log_tau.audio"] = log_tau_aud.data.reshape(1)
    path = run_dir / CKPT_DIR / "encoders.tdck"
    meta = _stage_meta(cfg, "align", rng_aud,
                       anchor_steps=cfg.align.anchor_steps,
                       finetune_steps=cfg.align.finetune_steps,
                       arch=_encoder_arch(),
                       retrieval={r[0] + "/" + r[1]: r[2] for r in retr})
    save_checkpoint(path, Checkpoint(meta=meta, arrays=arrays))
    for r in retr:
        print(f"[align] {r[1]} top-1 {r[2]:.3f}")
    return path


def _retrieval_rows(cfg: RunConfig, ds: Dataset, encs) -> list[tuple]:
    test = ds.indices("test")
    lat = {m: _encode_matrix(encs[m], [ds.samples[m][int(i)] for i in test])
           for m in MODALITIES}
    rows = []
    for query, gallery in (("image", "text"), ("audio", "text"), ("audio", "image")):
        acc = retrieval_accuracy(lat[query], lat[gallery], k=1)
        rows.append(("retrieval_top1", f"{query}->{gallery}", acc, cfg.seed, len(test)))
    return rows


def load_aligned_encoders(run_dir) -> tuple[dict[str, AlignmentEncoder], dict]:
    path = Path(run_dir) / CKPT_DIR / "encoders.tdck"
    ck = load_checkpoint(path)
    encs = {}
    for m in MODALITIES:
        enc = AlignmentEncoder(m, philox(0, 0))
        prefix = m + "."
        sub = {k[len(prefix):]: v for k, v in ck.arrays.items() if k.startswith(prefix)}
        enc.load_state_dict(sub)
        enc.freeze()
        encs[m] = enc
    return encs, ck.meta


# ---------------------------------------------------------------------------
# train
# ---------------------------------------------------------------------------

def stage_train(cfg: RunConfig, run_dir) -> Path:
    """Train the denoiser + control branch for the output modality.

    Batches come from the paired split; each step draws one condition
    modality from the configured list, conditions the base network on the
    half-masked payload's encoding and the control branch on the full
    payload's encoding.
    """
    run_dir = prepare_run_dir(cfg, run_dir)
    ds = load_run_dataset(run_dir)
    encoders, _ = load_aligned_encoders(run_dir)
    out_mod = cfg.sample.output_modality
    cond_mods = cfg.condition_list()
    paired = ds.indices("train-paired")
    if len(paired) < cfg.diffusion.batch:
        raise PipelineError(
            f"diffusion batch {cfg.diffusion.batch} exceeds paired split {len(paired)}")

    rng = stage_rng(cfg.seed, f"train_{out_mod}")
    dcfg = default_config(out_mod)
    base = ConditionalDenoiser(dcfg, rng)
    ctrl = init_control_branch(base, rng)
    if cfg.control.freeze_base:
        base.freeze()
        params = ctrl.parameters()
    else:
        params = base.parameters() + ctrl.parameters()
    opt = Adam(params, lr=cfg.diffusion.lr)
    schedule = make_schedule(cfg.diffusion.timesteps, cfg.diffusion.beta_start,
                             cfg.diffusion.beta_end)

    t0 = time.perf_counter()
    rows = []
    n_steps = cfg.diffusion.train_steps
    for step in range(1, n_steps + 1):
        # cosine decay lr -> lr_final across the budget
        frac = (step - 1) / max(n_steps - 1, 1)
        opt.lr = cfg.diffusion.lr_final + (cfg.diffusion.lr - cfg.diffusion.lr_final) \
            * 0.5 * (1.0 + np.cos(np.pi * frac))
        cm = cond_mods[int(rng.integers(0, len(cond_mods)))]
        take = rng.choice(paired, size=cfg.diffusion.batch, replace=False)
        batch = [TrainItem(z0=payload_to_latent(ds.samples[out_mod][int(i)]),
                           condition=ds.samples[cm][int(i)]) for i in take]
        loss = training_step(base, ctrl, encoders, batch, schedule, opt, rng,
                             scale=cfg.control.alpha, mode=cfg.control.fusion)
        rows.append((step, loss, opt.lr, time.perf_counter() - t0))
    log_dir = run_dir / LOG_DIR
    log_dir.mkdir(exist_ok=True)
    write_csv(log_dir / f"train_{out_mod}.csv", TRAIN_LOG_HEADER, rows)

    arrays: dict[str, np.ndarray] = {}
    for k, v in base.state_dict().items():
        arrays[f"base.{k}"] = v
    for k, v in ctrl.state_dict().items():
        arrays[f"ctrl.{k}"] = v
    path = run_dir / CKPT_DIR / f"diffusion_{out_mod}.tdck"
    meta = _stage_meta(cfg, "train", rng, modality=out_mod,
                       alpha=cfg.control.alpha, fusion=cfg.control.fusion,
                       freeze_base=cfg.control.freeze_base,
                       conditions=cond_mods, steps=cfg.diffusion.train_steps,
                       loss_first=rows[0][1], loss_last=rows[-1][1],
                       arch={"enc_blocks": dcfg.enc_blocks,
                             "resolutions": dcfg.resolutions,
                             "widths": list(dcfg.widths),
                             "latent_len": dcfg.latent_len,
                             "channels": dcfg.channels})
    save_checkpoint(path, Checkpoint(meta=meta, arrays=arrays))
    print(f"[train] {out_mod}: loss {rows[0][1]:.4f} -> {rows[-1][1]:.4f} "
          f"({time.perf_counter() - t0:.1f}s, conditions {'+'.join(cond_mods)})")
    return path


def load_diffusion(run_dir, modality: str):
    path = Path(run_dir) / CKPT_DIR / f"diffusion_{modality}.tdck"
    ck = load_checkpoint(path)
    dcfg = default_config(modality)
    want = {"enc_blocks": dcfg.enc_blocks, "resolutions": dcfg.resolutions,
            "widths": list(dcfg.widths), "latent_len": dcfg.latent_len,
            "channels": dcfg.channels}
    got = ck.meta.get("arch")
    if got != want:
        raise PipelineError(
            f"checkpoint architecture {got} does not match the built-in "
            f"default {want} for modality '{modality}'")
    base = ConditionalDenoiser(dcfg, philox(0, 0))
    ctrl = ControlBranch(dcfg, philox(0, 0))
    base.load_state_dict({k[5:]: v for k, v in ck.arrays.items() if k.startswith("base.")})
    ctrl.load_state_dict({k[5:]: v for k, v in ck.arrays.items() if k.startswith("ctrl.")})
    base.freeze()
    ctrl.freeze()
    return base, ctrl, ck.meta


# ---------------------------------------------------------------------------
# sample
# ---------------------------------------------------------------------------

def _condition_sets(ds: Dataset, encoders, cond_mods, indices) -> list[np.ndarray]:
    return [_encode_matrix(encoders[m], [ds.samples[m][int(i)] for i in indices])
            .astype(np.float32) for m in cond_mods]


def _write_payload_dir(out_dir: Path, samples, records_extra: dict) -> None:
    """Dataset-style payload pack: one .bin per modality + jsonl manifest."""
    out_dir.mkdir(parents=True, exist_ok=True)
    blobs: dict[str, bytearray] = {}
    lines = []
    counters: dict[str, int] = {}
    for s in samples:
        tag = _PAYLOAD_TAGS[s.modality]
        blob = blobs.setdefault(s.modality, bytearray())
        i = counters.get(s.modality, 0)
        counters[s.modality] = i + 1
        raw = np.ascontiguousarray(s.payload.astype(tag)).tobytes()
        rec = {"sample_id": f"{s.modality}-{i:06d}", "modality": s.modality,
               "concept_id": int(s.concept_id), "file": f"{s.modality}.bin",
               "offset": len(blob), "nbytes": len(raw), "dtype": tag,
               "shape": list(s.payload.shape)}
        rec.update(records_extra)
        lines.append(json.dumps(rec, sort_keys=True))
        blob.extend(raw)
    for m, blob in blobs.items():
        (out_dir / f"{m}.bin").write_bytes(bytes(blob))
    (out_dir / "manifest.jsonl").write_text("\n".join(lines) + "\n", encoding="utf-8")


def stage_sample(cfg: RunConfig, run_dir) -> Path:
    """Generate payloads for the first n_samples test concepts' conditions."""
    run_dir = prepare_run_dir(cfg, run_dir, check_config=False)
    ds = load_run_dataset(run_dir)
    encoders, _ = load_aligned_encoders(run_dir)
    out_mod = cfg.sample.output_modality
    cond_mods = cfg.condition_list()
    base, ctrl, _ = load_diffusion(run_dir, out_mod)
    n = cfg.sample.n_samples
    test = ds.indices("test")
    if n > len(test):
        raise PipelineError(f"n_samples {n} exceeds test split {len(test)}")
    idx = test[:n]

    sets = _condition_sets(ds, encoders, cond_mods, idx)
    schedule = make_schedule(cfg.diffusion.timesteps, cfg.diffusion.beta_start,
                             cfg.diffusion.beta_end)
    rng = stage_rng(cfg.seed, "sample")
    t0 = time.perf_counter()
    z = ddpm_sample_batch(base, ctrl, sets, schedule, rng, n,
                          scale=cfg.control.alpha, mode=cfg.control.fusion)
    decoded = []
    for i in range(n):
        s = decode_output(z[i], out_mod)
        s.concept_id = int(idx[i])
        decoded.append(s)

    out = run_dir / SAMPLE_DIR
    _write_payload_dir(out, decoded, {"conditions": cond_mods})
    (out / "conditions.json").write_text(json.dumps({
        "output_modality": out_mod, "conditions": cond_mods,
        "weights": [1.0 / len(cond_mods)] * len(cond_mods),
        "alpha": cfg.control.alpha, "fusion": cfg.control.fusion,
        "n": n, "seed": cfg.seed, "concept_ids": [int(i) for i in idx],
    }, indent=2, sort_keys=True), encoding="utf-8")
    print(f"[sample] {n} {out_mod} samples under {'+'.join(cond_mods)} "
          f"({time.perf_counter() - t0:.1f}s) -> {out}")
    return out


# ---------------------------------------------------------------------------
# eval
# ---------------------------------------------------------------------------

def _generated_bins(decoded, probe) -> np.ndarray:
    """(n, 8) probe bin predictions for generated continuous payloads."""
    with T.no_grad():
        logits = probe.logits(np.stack([s.payload.reshape(-1) for s in decoded]))
    return logits.data.reshape(len(decoded), N_FACTORS, N_BINS).argmax(axis=-1)


def _text_payload_bins(payload) -> list[int]:
    """Attribute slots of a token payload -> bins; -1 where the token does
    not name that slot's attribute at all."""
    from .data import attribute_token
    bins = []
    for k in range(N_FACTORS):
        tok = int(payload[1 + k])
        hit = [b for b in range(N_BINS) if attribute_token(k, b) == tok]
        bins.append(hit[0] if hit else -1)
    return bins


def _fit_probe(cfg: RunConfig, ds: Dataset, out_mod: str):
    uni = ds.indices("train-unimodal")
    samples = [ds.samples[out_mod][int(i)] for i in uni]
    concepts = ds.concepts[uni]
    return train_probe(out_mod, samples, concepts, stage_rng(cfg.seed, "probe"),
                       steps=cfg.eval.probe_steps)


def stage_eval(cfg: RunConfig, run_dir) -> Path:
    """Score the trained pipeline; writes metrics.csv.

    Two sampling variants run on the same checkpoint with identical noise
    streams: the configured alpha (control branch active) and the alpha=0
    ablation (base network on the interpolated condition only). Rows are
    tagged with the condition combination and variant.
    """
    run_dir = prepare_run_dir(cfg, run_dir)
    ds = load_run_dataset(run_dir)
    encoders, _ = load_aligned_encoders(run_dir)
    out_mod = cfg.sample.output_modality
    cond_mods = cfg.condition_list()
    base, ctrl, _ = load_diffusion(run_dir, out_mod)
    n = cfg.eval.n_eval
    test = ds.indices("test")
    if n > len(test):
        raise PipelineError(f"n_eval {n} exceeds test split {len(test)}")
    idx = test[:n]

    rows = list(_retrieval_rows(cfg, ds, encoders))

    sets = _condition_sets(ds, encoders, cond_mods, idx)
    mixed = np.mean(np.stack(sets, axis=0), axis=0)
    mixed_conditions = [LatentCondition(v=mixed[i].astype(np.float64),
                                        source_modality="compound")
                       for i in range(n)]
    target_bins = concept_bins(ds.concepts[idx])
    real_latents = _encode_matrix(encoders[out_mod],
                                  [ds.samples[out_mod][int(i)] for i in test])
    probe = None if out_mod == "text" else _fit_probe(cfg, ds, out_mod)
    schedule = make_schedule(cfg.diffusion.timesteps, cfg.diffusion.beta_start,
                             cfg.diffusion.beta_end)

    combo = "+".join(cond_mods)
    variants = [(cfg.control.alpha, f"alpha={_fmt(float(cfg.control.alpha))}")]
    if cfg.control.alpha != 0.0:
        variants.append((0.0, "alpha=0"))
    for alpha, tag in variants:
        t0 = time.perf_counter()
        rng = stage_rng(cfg.seed, "eval")  # same stream per variant: paired noise
        z = ddpm_sample_batch(base, ctrl, sets, schedule, rng, n,
                              scale=alpha, mode=cfg.control.fusion)
        decoded = [decode_output(z[i], out_mod) for i in range(n)]
        label = f"{combo}|{tag}"
        if out_mod == "text":
            acc = text_bin_accuracy(decoded, target_bins)
            rows.append(("text_bin_accuracy", label, acc, cfg.seed, n))
        else:
            acc = probe_accuracy(probe, decoded, target_bins)
            rows.append(("probe_accuracy", label, acc, cfg.seed, n))
        cons = condition_consistency(decoded, mixed_conditions, encoders)
        rows.append(("condition_consistency", label, cons, cfg.seed, n))
        gen_latents = _encode_matrix(encoders[out_mod], decoded)
        fd = frechet_distance(gen_latents, real_latents)
        rows.append(("frechet_latent", label, fd, cfg.seed, n))
        print(f"[eval] {label}: accuracy {acc:.3f} consistency {cons:.3f} "
              f"frechet {fd:.3f} ({time.perf_counter() - t0:.1f}s)")

    path = run_dir / METRICS_NAME
    write_csv(path, METRIC_HEADER, rows)
    return path


def read_metrics(run_dir) -> list[dict]:
    path = Path(run_dir) / METRICS_NAME
    if not path.is_file():
        raise PipelineError(f"metrics not found: {path} (run eval first)")
    lines = path.read_text(encoding="utf-8").strip().split("\n")
    header = lines[0].split(",")
    out = []
    for line in lines[1:]:
        parts = line.split(",")
        rec = dict(zip(header, parts))
        rec["value"] = float(rec["value"])
        out.append(rec)
    return out


# ---------------------------------------------------------------------------
# report
# ---------------------------------------------------------------------------

def stage_report(cfg: RunConfig, run_dir) -> Path:
    """Render charts + a text summary from the run's CSV artifacts."""
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    run_dir = prepare_run_dir(cfg, run_dir, check_config=False)
    out = run_dir / REPORT_DIR
    out.mkdir(exist_ok=True)

    log_dir = run_dir / LOG_DIR
    curves = sorted(log_dir.glob("*.csv")) if log_dir.is_dir() else []
    curves = [p for p in curves if p.name != "retrieval.csv"]
    if curves:
        fig, ax = plt.subplots(figsize=(7, 4))
        for p in curves:
            lines = p.read_text(encoding="utf-8").strip().split("\n")[1:]
            steps = [int(line.split(",")[0]) for line in lines]
            losses = [float(line.split(",")[1]) for line in lines]
            ax.plot(steps, losses, label=p.stem, linewidth=1.0)
        ax.set_xlabel("step")
        ax.set_ylabel("loss")
        ax.set_yscale("log")
        ax.legend(fontsize=8)
        ax.set_title("training curves")
        fig.tight_layout()
        fig.savefig(out / "training_losses.png", dpi=120)
        plt.close(fig)

    summary = [f"run seed {cfg.seed}"]
    metrics_path = run_dir / METRICS_NAME
    if metrics_path.is_file():
        recs = read_metrics(run_dir)
        fig, ax = plt.subplots(figsize=(8, 4))
        labels = [f"{r['metric']}\n{r['conditions']}" for r in recs]
        ax.bar(range(len(recs)), [r["value"] for r in recs])
        ax.set_xticks(range(len(recs)))
        ax.set_xticklabels(labels, fontsize=6, rotation=45, ha="right")
        ax.set_title("metrics")
        fig.tight_layout()
        fig.savefig(out / "metrics.png", dpi=120)
        plt.close(fig)
        width = max(len(r["metric"] + r["conditions"]) for r in recs) + 4
        for r in recs:
            summary.append(f"{(r['metric'] + ' ' + r['conditions']).ljust(width)}"
                           f"{r['value']:.6g}  (n={r['n']})")
    else:
        summary.append("no metrics.csv yet (run eval)")
    (out / "summary.txt").write_text("\n".join(summary) + "\n", encoding="utf-8")
    print(f"[report] -> {out}")
    return out


# ---------------------------------------------------------------------------
# demo: contradictory conditions
# ---------------------------------------------------------------------------

def stage_demo_contradict(cfg: RunConfig, run_dir, n_outputs: int = 8) -> Path:
    """Qualitative runner: condition modalities from two different concepts.

    The first condition modality describes concept A, the rest describe
    concept B; the sampler must reconcile them. Outputs plus a JSON
    account of whose attributes each generated sample kept are written to
    demo/. No pass/fail judgment is made.
    """
    run_dir = prepare_run_dir(cfg, run_dir, check_config=False)
    ds = load_run_dataset(run_dir)
    encoders, _ = load_aligned_encoders(run_dir)
    out_mod = cfg.sample.output_modality
    cond_mods = cfg.condition_list()
    if len(cond_mods) < 2:
        raise PipelineError("demo-contradict needs at least two condition modalities")
    base, ctrl, _ = load_diffusion(run_dir, out_mod)
    test = ds.indices("test")
    if len(test) < 2:
        raise PipelineError("demo-contradict needs at least two test concepts")
    a, b = int(test[0]), int(test[1])

    sets = []
    source = {}
    for j, m in enumerate(cond_mods):
        src = a if j == 0 else b
        source[m] = src
        lat = _encode_matrix(encoders[m], [ds.samples[m][src]])[0].astype(np.float32)
        sets.append(np.tile(lat, (n_outputs, 1)))
    schedule = make_schedule(cfg.diffusion.timesteps, cfg.diffusion.beta_start,
                             cfg.diffusion.beta_end)
    rng = stage_rng(cfg.seed, "demo")
    z = ddpm_sample_batch(base, ctrl, sets, schedule, rng, n_outputs,
                          scale=cfg.control.alpha, mode=cfg.control.fusion)
    decoded = [decode_output(z[i], out_mod) for i in range(n_outputs)]

    bins_a = concept_bins(ds.concepts[a]).tolist()
    bins_b = concept_bins(ds.concepts[b]).tolist()
    if out_mod == "text":
        gen_bins = [_text_payload_bins(s.payload) for s in decoded]
    else:
        probe = _fit_probe(cfg, ds, out_mod)
        gen_bins = _generated_bins(decoded, probe).tolist()
    agree_a = float(np.mean([np.asarray(g) == np.asarray(bins_a) for g in gen_bins]))
    agree_b = float(np.mean([np.asarray(g) == np.asarray(bins_b) for g in gen_bins]))

    out = run_dir / DEMO_DIR
    _write_payload_dir(out, decoded, {"conditions": cond_mods})
    (out / "demo.json").write_text(json.dumps({
        "output_modality": out_mod,
        "condition_sources": {m: int(c) for m, c in source.items()},
        "concept_bins": {"A": bins_a, "B": bins_b},
        "generated_bins": gen_bins,
        "bin_agreement": {"with_A": agree_a, "with_B": agree_b},
        "alpha": cfg.control.alpha, "fusion": cfg.control.fusion,
        "seed": cfg.seed,
    }, indent=2, sort_keys=True), encoding="utf-8")
    print(f"[demo-contradict] bin agreement A {agree_a:.3f} / B {agree_b:.3f} -> {out}")
    return out


# ---------------------------------------------------------------------------
# whole run
# ---------------------------------------------------------------------------

def run_all(cfg: RunConfig, run_dir) -> Path:
    """gen-data -> pretrain -> align -> train -> eval; returns metrics.csv."""
    stage_gen_data(cfg, run_dir)
    stage_pretrain(cfg, run_dir)
    stage_align(cfg, run_dir)
    stage_train(cfg, run_dir)
    return stage_eval(cfg, run_dir)
