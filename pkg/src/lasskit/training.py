"""Training: on-the-fly SNR mixing, L1 waveform loss, Adam, gradient checking.

Reverse-mode gradients come from torch autograd. ``grad_check`` compares them
against central finite differences of the same forward pass.
"""

from __future__ import annotations

import csv
import dataclasses
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np
import torch
from torch import nn

from .audio import AudioClip
from .checkpoint import load_checkpoint, save_checkpoint
from .corpus import CorpusItem, CorpusManifest
from .metrics import sdr
from .mixing import SilentSource, energy, mix_at_snr
from .model import ModelConfig, ParamStore, Separator, init_model
from .query import build_vocab

logger = logging.getLogger(__name__)

LOG_COLUMNS = ("step", "loss", "eval_sdri", "wall_ms")


class TrainingDiverged(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-3
    batch_size: int = 4
    segment_seconds: float = 1.0
    snr_range_db: tuple[float, float] = (-15.0, 15.0)
    max_steps: int = 2000
    seed: int = 0
    eval_every: int = 250
    checkpoint_every: int = 0
    eval_size: int = 64
    eval_seed: int = 1_000_003
    loss_domain: str = "waveform"

    def __post_init__(self):
        object.__setattr__(self, "snr_range_db", tuple(float(v) for v in self.snr_range_db))
        lo, hi = self.snr_range_db
        if lo > hi:
            raise ValueError(f"snr range ({lo}, {hi}) has lo > hi")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.max_steps < 0:
            raise ValueError("max_steps must be >= 0")
        if self.loss_domain != "waveform":
            raise ValueError("only the waveform loss domain is supported")

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["snr_range_db"] = list(self.snr_range_db)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        return cls(**{**d, "snr_range_db": tuple(d["snr_range_db"])})


# -- loss -------------------------------------------------------------------


def l1_loss(est: AudioClip, ref: AudioClip) -> float:
    """Mean absolute sample difference."""
    if len(est) != len(ref):
        raise ValueError(f"length mismatch: {len(est)} vs {len(ref)}")
    return float(np.mean(np.abs(est.samples - ref.samples)))


def l1_loss_torch(est: torch.Tensor, ref: torch.Tensor) -> torch.Tensor:
    if est.shape != ref.shape:
        raise ValueError(f"shape mismatch: {tuple(est.shape)} vs {tuple(ref.shape)}")
    return (est - ref).abs().mean()


# -- optimiser --------------------------------------------------------------


@dataclass
class AdamState:
    m: list[torch.Tensor]
    v: list[torch.Tensor]
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros_like(cls, tensors: list[torch.Tensor], **kw) -> "AdamState":
        return cls([torch.zeros_like(t) for t in tensors], [torch.zeros_like(t) for t in tensors], **kw)


def adam_step(
    params: list[torch.Tensor],
    grads: list[torch.Tensor | None],
    state: AdamState,
    lr: float,
    names: list[str] | None = None,
) -> None:
    """Bias-corrected Adam update, in place. Raises before touching anything on a non-finite update."""
    if len(params) != len(grads) or len(params) != len(state.m):
        raise ValueError("params, grads and optimiser state disagree in length")
    t = state.step + 1
    bc1 = 1.0 - state.beta1**t
    bc2 = 1.0 - state.beta2**t
    new_m, new_v, updates = [], [], []
    with torch.no_grad():
        for i, (p, g) in enumerate(zip(params, grads)):
            if g is None:
                g = torch.zeros_like(p)
            if g.shape != p.shape:
                raise ValueError(f"gradient shape {tuple(g.shape)} != parameter shape {tuple(p.shape)}")
            m = state.beta1 * state.m[i] + (1.0 - state.beta1) * g
            v = state.beta2 * state.v[i] + (1.0 - state.beta2) * g * g
            u = lr * (m / bc1) / ((v / bc2).sqrt() + state.eps)
            if not torch.isfinite(u).all():
                name = names[i] if names else str(i)
                raise FloatingPointError(f"non-finite Adam update for parameter {name}")
            new_m.append(m)
            new_v.append(v)
            updates.append(u)
        for p, u in zip(params, updates):
            p.sub_(u)
    state.m, state.v, state.step = new_m, new_v, t


# -- data -------------------------------------------------------------------


@dataclass(frozen=True)
class TrainingPair:
    target: AudioClip
    interferer: AudioClip
    query: str
    target_class: str
    interferer_id: str
    target_id: str


def random_segment(clip: AudioClip, n: int, rng: np.random.Generator) -> AudioClip:
    """A random length-``n`` window; shorter clips are tiled."""
    x = clip.samples
    if len(x) >= n:
        off = int(rng.integers(0, len(x) - n + 1))
        return AudioClip(x[off : off + n], clip.sample_rate)
    return AudioClip(np.resize(x, n), clip.sample_rate)


class PairSampler:
    """Draws class-disjoint (target, interferer) segments from a corpus."""

    def __init__(self, corpus: CorpusManifest, sample_rate: int, segment_seconds: float, max_tries: int = 50):
        self.corpus = corpus
        self.sample_rate = sample_rate
        self.n = int(round(segment_seconds * sample_rate))
        self.max_tries = max_tries
        self.classes = corpus.classes()
        if len(self.classes) < 2:
            raise ValueError("training needs a corpus with at least two classes")
        self._by_class = {c: corpus.items_with_label(c) for c in self.classes}
        self._disjoint: dict[str, list[CorpusItem]] = {}

    def _others(self, item: CorpusItem) -> list[CorpusItem]:
        if item.id not in self._disjoint:
            labels = set(item.labels)
            self._disjoint[item.id] = [it for it in self.corpus.items if not labels & set(it.labels)]
        return self._disjoint[item.id]

    def sample(self, rng: np.random.Generator) -> TrainingPair:
        for _ in range(self.max_tries):
            label = self.classes[int(rng.integers(len(self.classes)))]
            pool = self._by_class[label]
            tgt = pool[int(rng.integers(len(pool)))]
            others = self._others(tgt)
            if not others:
                continue
            intf = others[int(rng.integers(len(others)))]
            s1 = random_segment(self.corpus.audio(tgt.id, self.sample_rate), self.n, rng)
            s2 = random_segment(self.corpus.audio(intf.id, self.sample_rate), self.n, rng)
            query = tgt.captions[int(rng.integers(len(tgt.captions)))] if tgt.captions else label
            if energy(s1) > 0 and energy(s2) > 0:
                return TrainingPair(s1, s2, query, label, intf.id, tgt.id)
        raise SilentSource(f"no non-silent class-disjoint pair found in {self.max_tries} tries")


def sample_training_pair(
    corpus: CorpusManifest, cfg: TrainConfig, rng: np.random.Generator, sample_rate: int
) -> TrainingPair:
    return PairSampler(corpus, sample_rate, cfg.segment_seconds).sample(rng)


@dataclass
class Batch:
    mixture: np.ndarray
    target: np.ndarray
    queries: list[str]
    snr_db: list[float]


def make_batch(sampler: PairSampler, size: int, snr_range: tuple[float, float], rng: np.random.Generator) -> Batch:
    mixes, targets, queries, snrs = [], [], [], []
    for _ in range(size):
        pair = sampler.sample(rng)
        snr = float(rng.uniform(*snr_range))
        res = mix_at_snr(pair.target, pair.interferer, snr)
        mixes.append(res.mixture.samples)
        targets.append(res.target.samples)
        queries.append(pair.query)
        snrs.append(snr)
    return Batch(np.stack(mixes), np.stack(targets), queries, snrs)


def vocab_labels(corpus: CorpusManifest) -> list[str]:
    labels = corpus.classes()
    caps = sorted({c for it in corpus.items for c in it.captions})
    return labels + caps


# -- evaluation during training ---------------------------------------------


def model_dtype(model: nn.Module) -> torch.dtype:
    return next(model.parameters()).dtype


def predict(model: Separator, mixture: np.ndarray, queries: list[str], chunk: int = 16) -> np.ndarray:
    """Batched inference with running batch-norm statistics."""
    was_training = model.training
    model.eval()
    dtype = model_dtype(model)
    out = []
    try:
        with torch.no_grad():
            for s in range(0, len(queries), chunk):
                x = torch.as_tensor(mixture[s : s + chunk], dtype=dtype)
                est, _, _ = model(x, model.embed(queries[s : s + chunk]))
                out.append(est.double().numpy())
    finally:
        model.train(was_training)
    return np.concatenate(out)


def mean_sdri(model: Separator, batch: Batch) -> float:
    est = predict(model, batch.mixture, batch.queries)
    vals = [sdr(e, t) - sdr(m, t) for e, m, t in zip(est, batch.mixture, batch.target)]
    return math.fsum(vals) / len(vals)


def make_eval_batch(corpus: CorpusManifest, model_cfg: ModelConfig, cfg: TrainConfig) -> Batch:
    sampler = PairSampler(corpus, model_cfg.sample_rate, cfg.segment_seconds)
    return make_batch(sampler, cfg.eval_size, cfg.snr_range_db, np.random.default_rng(cfg.eval_seed))


# -- training loop ----------------------------------------------------------


@dataclass
class TrainResult:
    checkpoint: Path
    log: Path
    steps: int
    last_eval_sdri: float | None = None
    losses: list[float] = field(default_factory=list)
    best_checkpoint: Path | None = None
    best_eval_sdri: float | None = None


def _rng_state(rng: np.random.Generator) -> dict:
    return rng.bit_generator.state


def _restore_rng(state: dict) -> np.random.Generator:
    bg = getattr(np.random, state["bit_generator"])()
    bg.state = state
    return np.random.Generator(bg)


def _save(path, model, store, adam, rng, step, seed, model_cfg, cfg, last_eval, best=None):
    extra = {}
    for name, m, v in zip(store.names, adam.m, adam.v):
        extra[f"adam.m.{name}"] = m
        extra[f"adam.v.{name}"] = v
    state = {
        "step": step,
        "adam_step": adam.step,
        "rng": _rng_state(rng),
        "train_config": cfg.to_dict(),
        "last_eval_sdri": last_eval,
        "best": best,
    }
    save_checkpoint(path, model, seed=seed, extra_tensors=extra, state=state)


def _read_log(path: Path, upto: int) -> list[dict]:
    if not path.exists():
        return []
    with open(path, newline="") as fh:
        return [row for row in csv.DictReader(fh) if int(row["step"]) <= upto]


def train(
    corpus: CorpusManifest,
    model_cfg: ModelConfig,
    cfg: TrainConfig,
    out_dir: str | Path,
    eval_corpus: CorpusManifest | None = None,
    resume: str | Path | None = None,
    progress: Callable[[int, float], None] | None = None,
) -> TrainResult:
    """Run (or resume) training; writes ``checkpoint.ckpt`` and ``log.csv`` to ``out_dir``.

    With periodic evaluation enabled, the checkpoint with the highest eval SDRi so
    far is also kept as ``best.ckpt``.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    ckpt_path = out_dir / "checkpoint.ckpt"
    best_path = out_dir / "best.ckpt"
    log_path = out_dir / "log.csv"
    if cfg.segment_seconds * model_cfg.sample_rate <= model_cfg.window_size:
        raise ValueError("segment_seconds must exceed the STFT window duration")

    if resume is not None:
        model, header, extra = load_checkpoint(resume)
        model_cfg = model.cfg
        state = header["state"]
        store = ParamStore.of(model)
        adam = AdamState(
            [extra[f"adam.m.{n}"].clone() for n in store.names],
            [extra[f"adam.v.{n}"].clone() for n in store.names],
            step=state["adam_step"],
        )
        rng = _restore_rng(state["rng"])
        step = int(state["step"])
        last_eval = state.get("last_eval_sdri")
        best = state.get("best")
    else:
        vocab = build_vocab(vocab_labels(corpus), model_cfg.d_query, cfg.seed)
        model = init_model(model_cfg, vocab, cfg.seed)
        store = ParamStore.of(model)
        adam = AdamState.zeros_like(store.tensors)
        rng = np.random.default_rng(cfg.seed)
        step = 0
        last_eval = None
        best = None

    ckpt_every = cfg.checkpoint_every or cfg.eval_every or cfg.max_steps or 1
    rows = _read_log(log_path, step) if resume is not None else []
    with open(log_path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=LOG_COLUMNS)
        writer.writeheader()
        writer.writerows(rows)

    def result(losses=()):
        has_best = best is not None and best_path.exists()
        return TrainResult(
            ckpt_path,
            log_path,
            step,
            last_eval,
            list(losses),
            best_path if has_best else None,
            best["eval_sdri"] if has_best else None,
        )

    if step >= cfg.max_steps:
        _save(ckpt_path, model, store, adam, rng, step, cfg.seed, model_cfg, cfg, last_eval, best)
        return result()

    sampler = PairSampler(corpus, model_cfg.sample_rate, cfg.segment_seconds)
    eval_batch = make_eval_batch(eval_corpus or corpus, model_cfg, cfg) if cfg.eval_every else None
    losses = []
    model.train()
    with open(log_path, "a", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=LOG_COLUMNS)
        while step < cfg.max_steps:
            t0 = time.perf_counter()
            batch = make_batch(sampler, cfg.batch_size, cfg.snr_range_db, rng)
            x = torch.as_tensor(batch.mixture, dtype=torch.float32)
            y = torch.as_tensor(batch.target, dtype=torch.float32)
            est, _, _ = model(x, model.embed(batch.queries))
            loss = l1_loss_torch(est, y)
            if not torch.isfinite(loss):
                _save(ckpt_path, model, store, adam, rng, step, cfg.seed, model_cfg, cfg, last_eval, best)
                raise TrainingDiverged(f"non-finite loss at step {step + 1}; last good checkpoint kept")
            model.zero_grad(set_to_none=True)
            loss.backward()
            grads = [p.grad for p in store.tensors]
            for name, g in zip(store.names, grads):
                if g is not None and not torch.isfinite(g).all():
                    _save(ckpt_path, model, store, adam, rng, step, cfg.seed, model_cfg, cfg, last_eval, best)
                    raise TrainingDiverged(f"non-finite gradient for {name} at step {step + 1}")
            adam_step(store.tensors, grads, adam, cfg.learning_rate, store.names)
            step += 1
            loss_value = float(loss.item())
            losses.append(loss_value)

            eval_value = ""
            if eval_batch is not None and step % cfg.eval_every == 0:
                last_eval = mean_sdri(model, eval_batch)
                eval_value = repr(last_eval)
                logger.info("step %d: loss %.5f eval SDRi %.2f dB", step, loss_value, last_eval)
                if best is None or last_eval > best["eval_sdri"]:
                    best = {"step": step, "eval_sdri": last_eval}
                    _save(best_path, model, store, adam, rng, step, cfg.seed, model_cfg, cfg, last_eval, best)
            wall_ms = (time.perf_counter() - t0) * 1000.0
            writer.writerow({"step": step, "loss": repr(loss_value), "eval_sdri": eval_value, "wall_ms": f"{wall_ms:.1f}"})
            fh.flush()
            if step % ckpt_every == 0 or step == cfg.max_steps:
                _save(ckpt_path, model, store, adam, rng, step, cfg.seed, model_cfg, cfg, last_eval, best)
            if progress is not None:
                progress(step, loss_value)
    return result(losses)


# -- gradient checking ------------------------------------------------------


@dataclass
class GradCheckResult:
    max_rel_error: float
    checked: int
    skipped: int
    worst_parameter: str = ""
    tolerance: float = 1e-4
    note: str = ""

    @property
    def passed(self) -> bool:
        return self.checked > 0 and self.max_rel_error < self.tolerance


def tiny_config(**overrides) -> ModelConfig:
    """A model small enough (< 5k parameters) for exhaustive-ish finite differences."""
    base = dict(
        n_encoder_blocks=2,
        n_bottleneck_blocks=1,
        channels=(2, 4),
        units_per_block=1,
        d_query=4,
        film_hidden=4,
        sample_rate=8000,
        window_size=64,
        hop_size=16,
    )
    base.update(overrides)
    return ModelConfig(**base)


def randomize_parameters(model: nn.Module, seed: int = 0, scale: float = 0.3) -> None:
    """Add noise to every parameter so zero-initialised layers carry gradient."""
    g = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for p in model.parameters():
            p.add_(scale * torch.randn(p.shape, generator=g, dtype=p.dtype))


def grad_check(
    model: Separator,
    mixture: np.ndarray,
    target: np.ndarray,
    queries: list[str],
    eps: float = 1e-4,
    n_params: int = 200,
    seed: int = 0,
    tol: float = 1e-4,
    corrupt: int | None = None,
    corrupt_factor: float = 1.1,
) -> GradCheckResult:
    """Compare autograd gradients with central differences on ``n_params`` random parameters.

    The model is converted to float64 in place. A perturbation that flips the
    sign of any (Leaky)ReLU input or of any L1 residual straddles a kink; such
    parameters are skipped, counted, and replaced by further draws.
    ``corrupt`` scales the analytic gradient of the ``corrupt``-th checked
    parameter (or the next one with a visible gradient) by ``corrupt_factor``.
    """
    model.double().train()
    x = torch.as_tensor(mixture, dtype=torch.float64)
    y = torch.as_tensor(target, dtype=torch.float64)
    signs: list[torch.Tensor] = []

    def hook(_mod, inp, _out):
        signs.append((inp[0] > 0).flatten())

    handles = [m.register_forward_hook(hook) for m in model.modules() if isinstance(m, (nn.LeakyReLU, nn.ReLU))]

    def run():
        signs.clear()
        est, _, _ = model(x, model.embed(queries))
        r = est - y
        return r.abs().mean(), torch.cat(signs + [(r > 0).flatten()]), r

    try:
        loss, sig0, r0 = run()
        if bool((r0.abs() < 1e-6).all()):
            return GradCheckResult(0.0, 0, 0, tolerance=tol, note="zero-loss sample: every residual is a tie point")
        store = ParamStore.of(model)
        grads = torch.autograd.grad(loss, store.tensors, allow_unused=True)
        grads = [torch.zeros_like(p) if g is None else g for p, g in zip(store.tensors, grads)]

        rng = np.random.default_rng(seed)
        order = rng.permutation(len(store))
        worst, worst_name, checked, skipped = 0.0, "", 0, 0
        corrupted = corrupt is None
        for flat in order:
            if checked >= n_params:
                break
            i, j = store.locate(int(flat))
            p = store.tensors[i].data.view(-1)
            orig = p[j].item()
            with torch.no_grad():
                p[j] = orig + eps
                lp, sp, _ = run()
                p[j] = orig - eps
                lm, sm, _ = run()
                p[j] = orig
            if not (torch.equal(sp, sig0) and torch.equal(sm, sig0)):
                skipped += 1
                continue
            g_fd = (lp.item() - lm.item()) / (2 * eps)
            g_an = grads[i].view(-1)[j].item()
            # inject into a parameter whose gradient is large enough for the fault to be visible
            if not corrupted and checked >= corrupt and abs(g_an) >= 1e-6:
                g_an *= corrupt_factor
                corrupted = True
            checked += 1
            rel = abs(g_an - g_fd) / max(abs(g_fd), 1e-8)
            if rel > worst:
                worst, worst_name = rel, f"{store.names[i]}[{j}]"
    finally:
        for h in handles:
            h.remove()
    return GradCheckResult(worst, checked, skipped, worst_name, tol)


def grad_check_tiny(
    seed: int = 0, n_params: int = 200, corrupt: int | None = None, eps: float = 1e-4, tol: float = 1e-4
) -> GradCheckResult:
    """Gradient check of a randomly perturbed :func:`tiny_config` model on random audio."""
    cfg = tiny_config()
    vocab = build_vocab(["alpha", "beta"], cfg.d_query, seed)
    model = init_model(cfg, vocab, seed)
    randomize_parameters(model, seed)
    rng = np.random.default_rng(seed)
    n = 4 * cfg.window_size
    mixture = rng.standard_normal((2, n)) * 0.5
    target = rng.standard_normal((2, n)) * 0.5
    return grad_check(model, mixture, target, ["alpha", "beta"], eps, n_params, seed, tol, corrupt)


def numeric_gradient(fn: Callable[[torch.Tensor], torch.Tensor], x: torch.Tensor, eps: float = 1e-6) -> torch.Tensor:
    """Central-difference gradient of a scalar function of one tensor."""
    g = torch.zeros_like(x)
    flat = x.data.view(-1)
    gflat = g.view(-1)
    with torch.no_grad():
        for k in range(flat.numel()):
            orig = flat[k].item()
            flat[k] = orig + eps
            fp = fn(x).item()
            flat[k] = orig - eps
            fm = fn(x).item()
            flat[k] = orig
            gflat[k] = (fp - fm) / (2 * eps)
    return g


def op_grad_error(fn: Callable[..., torch.Tensor], *inputs: torch.Tensor, eps: float = 1e-6) -> float:
    """Max relative error between autograd and finite differences over all inputs of ``fn``."""
    inputs = [t.detach().double().clone().requires_grad_(True) for t in inputs]
    out = fn(*inputs)
    analytic = torch.autograd.grad(out, inputs, allow_unused=True)
    worst = 0.0
    for k, (t, a) in enumerate(zip(inputs, analytic)):
        a = torch.zeros_like(t) if a is None else a

        def f_k(z, k=k):
            args = list(inputs)
            args[k] = z
            return fn(*args)

        num = numeric_gradient(f_k, t, eps)
        rel = ((a - num).abs() / num.abs().clamp_min(1e-8)).max().item()
        worst = max(worst, rel)
    return worst
