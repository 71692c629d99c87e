"""Training loop, learning-rate schedule, checkpoints and experiment reports."""

from __future__ import annotations

import json
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .config import ExperimentConfig, ModelConfig, read_config_file, write_config_file
from .lora import LoRAConfig, apply_lora, trainable_param_report
from .mixsim import Corpus, CorpusConfig, DataError, Manifest, ManifestRecord, build_corpus, \
    mismatched_enrollment_variant
from .model import Batch, TargetSpeakerASR
from .nn import Adam
from .scoring import corpus_wer
from .sqformer import batch_contrastive_loss, combined_loss, prompt_separation_metric, sample_negatives


class NumericalError(RuntimeError):
    """Loss or gradient became NaN/inf (CLI exit code 4)."""


def lr_at(step: int, peak_lr: float, warmup_steps: int, decay: str = "inv-sqrt") -> float:
    """Linear warm-up to ``peak_lr`` then ``peak * sqrt(warmup / step)`` (or flat)."""
    if step < 0:
        raise ValueError("step must be >= 0")
    if warmup_steps < 1:
        raise ValueError("warmup_steps must be >= 1")
    if step <= warmup_steps:
        return peak_lr * step / warmup_steps
    if decay == "none":
        return peak_lr
    if decay != "inv-sqrt":
        raise ValueError(f"unknown decay {decay!r}")
    return peak_lr * math.sqrt(warmup_steps / step)


# -- checkpoints -------------------------------------------------------------

@dataclass
class Checkpoint:
    params: dict[str, np.ndarray]
    epoch: int
    val_loss: float
    config_hash: str
    val_wer: float = float("nan")
    source_epochs: list[int] = field(default_factory=list)


class CheckpointMismatch(ValueError):
    pass


def save_checkpoint(path: str | Path, ckpt: Checkpoint) -> None:
    meta = {"epoch": ckpt.epoch, "val_loss": ckpt.val_loss, "val_wer": ckpt.val_wer,
            "config_hash": ckpt.config_hash, "source_epochs": ckpt.source_epochs,
            "names": sorted(ckpt.params)}
    arrays = {f"p{i}": ckpt.params[name] for i, name in enumerate(meta["names"])}
    with open(path, "wb") as fh:
        np.savez(fh, __meta__=np.frombuffer(json.dumps(meta).encode(), dtype=np.uint8), **arrays)


def load_checkpoint(path: str | Path, config_hash: str | None = None) -> Checkpoint:
    with np.load(path) as z:
        meta = json.loads(bytes(z["__meta__"]).decode())
        params = {name: z[f"p{i}"].copy() for i, name in enumerate(meta["names"])}
    if config_hash is not None and meta["config_hash"] != config_hash:
        raise CheckpointMismatch(f"checkpoint built for config {meta['config_hash']}, expected {config_hash}")
    return Checkpoint(params, meta["epoch"], meta["val_loss"], meta["config_hash"], meta["val_wer"],
                      meta["source_epochs"])


def average_checkpoints(ckpts: list[Checkpoint], k: int | None = None, by: str = "loss") -> Checkpoint:
    """Parameter-wise mean of the ``k`` checkpoints with the lowest validation loss (or WER)."""
    if not ckpts:
        raise ValueError("no checkpoints to average")
    k = len(ckpts) if k is None else k
    if not 1 <= k <= len(ckpts):
        raise ValueError(f"cannot pick {k} of {len(ckpts)} checkpoints")
    key = (lambda c: (c.val_loss, c.epoch)) if by == "loss" else (lambda c: (c.val_wer, c.val_loss, c.epoch))
    best = sorted(ckpts, key=key)[:k]
    names = set(best[0].params)
    for c in best[1:]:
        if set(c.params) != names:
            raise ValueError("checkpoints hold different parameter sets")
        for n in names:
            if c.params[n].shape != best[0].params[n].shape:
                raise ValueError(f"shape mismatch for {n}: {c.params[n].shape} vs {best[0].params[n].shape}")
    avg = {n: np.mean([c.params[n].astype(np.float64) for c in best], axis=0).astype(best[0].params[n].dtype)
           for n in names}
    return Checkpoint(avg, max(c.epoch for c in best), float(np.mean([c.val_loss for c in best])),
                      best[0].config_hash, float(np.mean([c.val_wer for c in best])),
                      sorted(c.epoch for c in best))


def lora_only(ckpt: Checkpoint) -> Checkpoint:
    """Copy of ``ckpt`` holding just the low-rank side-path matrices."""
    params = {n: p for n, p in ckpt.params.items() if n.endswith((".lora_a", ".lora_b"))}
    return Checkpoint(params, ckpt.epoch, ckpt.val_loss, ckpt.config_hash, ckpt.val_wer, ckpt.source_epochs)


# -- data --------------------------------------------------------------------

def corpus_config(cfg: ExperimentConfig) -> CorpusConfig:
    return CorpusConfig(n_speakers=cfg.speakers, utts_per_speaker=cfg.utts, vocab=cfg.vocab,
                        min_tokens=cfg.min_tokens, max_tokens=cfg.max_tokens, seed=cfg.seed,
                        condition=cfg.condition, mode=cfg.mode, n_mixtures=cfg.mixtures, n_mels=cfg.n_mels)


def load_corpus(cfg: ExperimentConfig) -> Corpus | Manifest:
    if cfg.data_dir:
        return Manifest.read(Path(cfg.data_dir) / "manifest.tsv")
    return build_corpus(corpus_config(cfg))


def _loader(source):
    return source.load if isinstance(source, Corpus) else source.features


def _manifest(source) -> Manifest:
    return source.manifest if isinstance(source, Corpus) else source


def make_batch(records: list[ManifestRecord], load, embed_dim: int | None = None) -> Batch:
    return Batch.from_lists([load(r.mixture_path) for r in records],
                            [load(r.enrollment_path) for r in records],
                            [r.transcript for r in records], [r.target_speaker_id for r in records],
                            embed_dim)


def feature_stats(records, load) -> tuple[float, float]:
    mats = [load(r.mixture_path) for r in records]
    allv = np.concatenate([m.ravel() for m in mats]).astype(np.float64)
    return float(allv.mean()), float(allv.std() + 1e-8)


def batches(records, size: int, rng: np.random.Generator | None):
    order = np.arange(len(records)) if rng is None else rng.permutation(len(records))
    for i in range(0, len(records), size):
        yield [records[j] for j in order[i:i + size]]


# -- training ----------------------------------------------------------------

@dataclass
class TrainResult:
    model: TargetSpeakerASR
    history: list[dict]
    checkpoint: Checkpoint
    config_hash: str


def build_model(cfg: ExperimentConfig, feat_mean: float = 0.0, feat_std: float = 1.0) -> TargetSpeakerASR:
    mcfg: ModelConfig = cfg.model_config(feat_mean, feat_std)
    model = TargetSpeakerASR(mcfg, np.random.default_rng([cfg.seed, 3]))
    if cfg.init_checkpoint:
        model.load_state_dict(load_checkpoint(cfg.init_checkpoint).params, strict=False)
    if cfg.peft == "lora":
        apply_lora(model.backbone, LoRAConfig(rank=cfg.lora_rank), np.random.default_rng([cfg.seed, 4]))
        model.assign_names()
    return model


def _check_finite(value: float, what: str, epoch: int, step: int) -> None:
    if not np.isfinite(value):
        raise NumericalError(f"{what} is {value} at epoch {epoch}, step {step}")


def batch_loss(model: TargetSpeakerASR, batch: Batch, cfg: ExperimentConfig, rng=None, used_k=None):
    """(total, ce, contrastive) for one batch; contrastive is None without an SQ-Former.

    ``used_k`` collects the number of negatives each anchor actually got.
    """
    ce, out = model.loss(batch)
    if out.prompt is None or cfg.alpha == 0:
        return ce, ce, None
    cands = sample_negatives(batch.speakers, cfg.negatives, rng or np.random.default_rng(0))
    if used_k is not None:
        used_k.extend(int(k) for k in cands.sum(axis=1) - 1)
    con = batch_contrastive_loss(out.prompt.pooled, out.prompt.enroll_pooled, cands, cfg.kappa)
    return combined_loss(ce, con, cfg.alpha), ce, con


def evaluate_loss(model, records, load, cfg: ExperimentConfig) -> float:
    if not records:
        return float("nan")
    total = weight = 0.0
    embed = model.cfg.d_embed if model.adapter is not None else None
    with ad.no_grad():
        for chunk in batches(records, cfg.batch_size, None):
            ce, _ = model.loss(make_batch(chunk, load, embed))
            total += float(ce.data) * len(chunk)
            weight += len(chunk)
    return total / weight


def transcribe(model, records, load, batch_size: int = 32) -> list[list[int]]:
    embed = model.cfg.d_embed if model.adapter is not None else None
    hyps: list[list[int]] = []
    for chunk in batches(records, batch_size, None):
        hyps.extend(model.transcribe(make_batch(chunk, load, embed)))
    return hyps


def train(cfg: ExperimentConfig, source, log=None) -> TrainResult:
    manifest = _manifest(source)
    load = _loader(source)
    train_recs, dev_recs = manifest.split("train"), manifest.split("dev")
    if not train_recs:
        raise DataError("training split is empty")
    mean, std = feature_stats(train_recs, load)
    model = build_model(cfg, mean, std)
    embed = model.cfg.d_embed if model.adapter is not None else None
    opt = Adam(model.parameters(), lr=0.0, clip_norm=cfg.clip_norm or None)
    rng = np.random.default_rng([cfg.seed, 5])
    history, ckpts = [], []
    step = 0
    digest = cfg.digest()
    for epoch in range(1, cfg.epochs + 1):
        t0 = time.time()
        sums = {"loss": 0.0, "ce": 0.0, "contrastive": 0.0}
        n_batches = 0
        used_k: list[int] = []
        for chunk in batches(train_recs, cfg.batch_size, rng):
            step += 1
            opt.lr = lr_at(step, cfg.peak_lr, cfg.warmup_steps, cfg.lr_decay)
            model.zero_grad()
            loss, ce, con = batch_loss(model, make_batch(chunk, load, embed), cfg, rng, used_k)
            _check_finite(float(loss.data), "loss", epoch, step)
            loss.backward()
            _check_finite(opt.step(), "gradient norm", epoch, step)
            sums["loss"] += float(loss.data)
            sums["ce"] += float(ce.data)
            sums["contrastive"] += float(con.data) if con is not None else 0.0
            n_batches += 1
        val = evaluate_loss(model, dev_recs, load, cfg)
        entry = {"epoch": epoch, "step": step, "lr": opt.lr, "val_loss": val, "seconds": round(time.time() - t0, 3)}
        entry.update({k: v / n_batches for k, v in sums.items()})
        if used_k:
            entry.update({"negatives_min": min(used_k), "negatives_mean": float(np.mean(used_k))})
        val_wer = float("nan")
        if cfg.select_by == "wer" and dev_recs:
            val_wer = corpus_wer([r.transcript for r in dev_recs], transcribe(model, dev_recs, load)).rate
            entry["val_wer"] = val_wer
        history.append(entry)
        if log is not None:
            log(entry)
        ckpts.append(Checkpoint(model.state_dict(), epoch, val if np.isfinite(val) else entry["loss"], digest,
                                val_wer))
    k = min(cfg.average_best, len(ckpts)) if cfg.average_best > 0 else 1
    if cfg.average_best > 0:
        final = average_checkpoints(ckpts, k, cfg.select_by)
    else:
        final = ckpts[-1]
    model.load_state_dict(final.params)
    if cfg.checkpoint_dir:
        out = Path(cfg.checkpoint_dir)
        out.mkdir(parents=True, exist_ok=True)
        save_checkpoint(out / "averaged.npz", final)
        save_checkpoint(out / "last.npz", ckpts[-1])
        if cfg.peft == "lora":
            save_checkpoint(out / "lora.npz", lora_only(final))
        write_config_file(out / "config.txt", cfg)
        (out / "model.json").write_text(json.dumps(model.cfg.to_dict(), indent=2))
    return TrainResult(model, history, final, digest)


# -- experiments -------------------------------------------------------------

def separation_metric(model: TargetSpeakerASR, records, load, batch_size: int = 32) -> float | None:
    if model.sqformer is None:
        return None
    embed = model.cfg.d_embed if model.adapter is not None else None
    pooled, labels = [], []
    for chunk in batches(records, batch_size, None):
        prompt = model.speaker_prompts(make_batch(chunk, load, embed))
        pooled.append(prompt.pooled.data)
        labels.extend(r.target_speaker_id for r in chunk)
    try:
        return prompt_separation_metric(np.concatenate(pooled), labels)
    except ValueError:
        return None


def evaluate(model, manifest: Manifest, load, split: str = "test", mismatch_seed: int | None = None) -> dict:
    recs = manifest.split(split)
    if not recs:
        raise DataError(f"split {split!r} is empty")
    refs = [r.transcript for r in recs]
    hyps = transcribe(model, recs, load)
    res = corpus_wer(refs, hyps)
    out = {"split": split, "ter": res.rate, "sub": res.substitutions, "del": res.deletions,
           "ins": res.insertions, "ref_tokens": res.ref_len, "hypotheses": hyps}
    if mismatch_seed is not None:
        mm = mismatched_enrollment_variant(Manifest(recs, manifest.root, manifest.speakers_disjoint,
                                                    manifest._cache), np.random.default_rng(mismatch_seed),
                                          pool_from=manifest)
        mm_hyps = transcribe(model, mm.records, load)
        r2 = corpus_wer(refs, mm_hyps)
        out.update({"ter_mismatched": r2.rate, "hypotheses_mismatched": mm_hyps})
    return out


def run_experiment(cfg: ExperimentConfig, out_dir: str | Path | None = None, source=None,
                   verbose: bool = False) -> dict:
    """Train, decode the test split (matched and optionally mismatched enrollment) and report."""
    source = source if source is not None else load_corpus(cfg)
    manifest, load = _manifest(source), _loader(source)
    lines: list[dict] = []

    def log(entry):
        lines.append(entry)
        if verbose:
            print(json.dumps(entry), flush=True)

    t0 = time.time()
    result = train(cfg, source, log)
    mm_seed = cfg.seed + 1000 if cfg.eval_mismatch and cfg.speakers >= 3 else None
    ev = evaluate(result.model, manifest, load, "test", mm_seed)
    report = trainable_param_report(result.model)
    summary = {
        "config_hash": result.config_hash,
        "seed": cfg.seed,
        "config": cfg.to_dict(),
        "epochs": [{k: v for k, v in h.items() if k != "seconds"} for h in result.history],
        "averaged_epochs": result.checkpoint.source_epochs,
        "ter": ev["ter"],
        "ter_mismatched": ev.get("ter_mismatched"),
        "errors": {"sub": ev["sub"], "del": ev["del"], "ins": ev["ins"], "ref_tokens": ev["ref_tokens"]},
        "prompt_separation": separation_metric(result.model, manifest.split("test"), load),
        "params": {"trainable": report["trainable"], "total": report["total"],
                   "components": report["components"]},
        "hypotheses": ev["hypotheses"],
        "hypotheses_mismatched": ev.get("hypotheses_mismatched"),
    }
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        with open(out / "log.jsonl", "w") as fh:
            for entry in lines:
                fh.write(json.dumps(entry) + "\n")
        (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True))
        (out / "timing.json").write_text(json.dumps({"seconds": round(time.time() - t0, 3)}))
    summary["model"] = result.model
    return summary


def load_trained(run_dir: str | Path, which: str = "averaged") -> TargetSpeakerASR:
    """Rebuild a model from a checkpoint directory written by ``train``."""
    run_dir = Path(run_dir)
    for name in ("config.txt", "model.json", f"{which}.npz"):
        if not (run_dir / name).exists():
            raise DataError(f"{run_dir / name} not found")
    cfg = read_config_file(run_dir / "config.txt")
    mcfg = ModelConfig.from_dict(json.loads((run_dir / "model.json").read_text()))
    model = build_model(cfg.replace(init_checkpoint=""), mcfg.feat_mean, mcfg.feat_std)
    model.load_state_dict(load_checkpoint(run_dir / f"{which}.npz", cfg.digest()).params)
    return model
