"""Deterministic training loop: decoupled-weight-decay optimizer, warmup+cosine
schedule, loss-spike monitoring, curriculum-stage transitions, and resumable
checkpoints.

Every stochastic choice (document order, objective per step, corruption
placement) derives from (seed, stage, step), so a run is a pure function of
its config and an interrupted run replays to the same trajectory bit-exactly.
"""

from __future__ import annotations

import csv
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .data import CurriculumStage, MixtureSampler, SftExample, format_sft, pack_sequences, span_corrupt
from .errors import ConfigError, DeskLMError, NumericError
from .model import DeskLM
from .tensor import Tensor, backward, cross_entropy

IGNORE = -1


# -- optimizer ---------------------------------------------------------------------


@dataclass
class OptimizerConfig:
    peak_lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.95
    eps: float = 1e-8
    weight_decay: float = 0.0
    grad_clip_norm: float | None = 1.0

    def __post_init__(self):
        if self.peak_lr <= 0:
            raise ConfigError(f"peak_lr must be positive, got {self.peak_lr}")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ConfigError(f"betas must lie in [0, 1), got ({self.beta1}, {self.beta2})")
        if self.grad_clip_norm is not None and self.grad_clip_norm < 0:
            raise ConfigError(f"grad_clip_norm must be >= 0 or None, got {self.grad_clip_norm}")


class OptimizerState:
    """Adaptive moments with decoupled weight decay and bias correction."""

    def __init__(self, params: dict[str, Tensor], config: OptimizerConfig):
        self.config = config
        self.step_count = 0
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}

    def clip_grads(self, params: dict[str, Tensor]) -> float:
        """Global-norm clip; a threshold of exactly 0 zeroes every gradient."""
        clip = self.config.grad_clip_norm
        total = math.sqrt(sum(float(np.sum(p.grad * p.grad))
                              for p in params.values() if p.grad is not None))
        if clip is None:
            return total
        if total > clip:
            scale = clip / total if total > 0 else 0.0
            for p in params.values():
                if p.grad is not None:
                    p.grad *= scale
        return total

    def apply(self, params: dict[str, Tensor], lr: float) -> None:
        c = self.config
        self.step_count += 1
        t = self.step_count
        bc1 = 1.0 - c.beta1 ** t
        bc2 = 1.0 - c.beta2 ** t
        for name, p in params.items():
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            m = self.m[name]
            v = self.v[name]
            m *= c.beta1
            m += (1.0 - c.beta1) * g
            v *= c.beta2
            v += (1.0 - c.beta2) * g * g
            update = (m / bc1) / (np.sqrt(v / bc2) + c.eps)
            if c.weight_decay:
                update = update + c.weight_decay * p.data
            p.data = p.data - (lr * update).astype(p.data.dtype)

    def tensors(self) -> dict[str, np.ndarray]:
        out = {f"opt.m.{k}": v for k, v in self.m.items()}
        out.update({f"opt.v.{k}": v for k, v in self.v.items()})
        return out

    def restore(self, stored: dict[str, np.ndarray], step_count: int) -> None:
        for k in self.m:
            self.m[k] = stored[f"opt.m.{k}"].copy()
            self.v[k] = stored[f"opt.v.{k}"].copy()
        self.step_count = step_count


# -- schedule -----------------------------------------------------------------------


@dataclass
class Schedule:
    warmup_steps: int
    total_steps: int
    peak_lr: float
    final_lr_fraction: float = 0.1

    def __post_init__(self):
        if not 0 <= self.warmup_steps < self.total_steps:
            raise ConfigError(
                f"need 0 <= warmup_steps < total_steps, got {self.warmup_steps}, {self.total_steps}")
        if self.peak_lr <= 0:
            raise ConfigError(f"peak_lr must be positive, got {self.peak_lr}")
        if not 0 <= self.final_lr_fraction <= 1:
            raise ConfigError(f"final_lr_fraction must be in [0, 1], got {self.final_lr_fraction}")


def lr_at(step: int, s: Schedule) -> float:
    """Linear warmup 0 -> peak, then cosine decay to peak * final_lr_fraction."""
    if not 0 <= step <= s.total_steps:
        raise ConfigError(f"step {step} outside [0, {s.total_steps}]")
    if step < s.warmup_steps:
        return s.peak_lr * step / s.warmup_steps
    final = s.peak_lr * s.final_lr_fraction
    span = s.total_steps - s.warmup_steps
    progress = (step - s.warmup_steps) / span
    return final + (s.peak_lr - final) * 0.5 * (1.0 + math.cos(math.pi * progress))


# -- spike detection -----------------------------------------------------------------


def detect_spike(history, new_loss: float, k: float = 10.0, min_window: int = 16) -> bool:
    """Flag iff new_loss is non-finite, or exceeds median + k * MAD of the
    recent window (flagging enabled only once min_window losses are in)."""
    if not math.isfinite(new_loss):
        return True
    hist = np.asarray(list(history), dtype=np.float64)
    if hist.size < min_window:
        return False
    med = float(np.median(hist))
    mad = float(np.median(np.abs(hist - med)))
    return new_loss > med + k * mad


# -- run log -------------------------------------------------------------------------


@dataclass
class RunRecord:
    step: int
    stage: str
    loss: float
    lr: float
    tokens: int
    seconds: float


@dataclass
class RunLog:
    records: list[RunRecord] = field(default_factory=list)
    spikes: list[dict] = field(default_factory=list)

    def append(self, rec: RunRecord) -> None:
        if self.records and rec.step <= self.records[-1].step:
            raise ConfigError(f"run log steps must increase, got {rec.step} after "
                              f"{self.records[-1].step}")
        if not math.isfinite(rec.loss):
            raise ConfigError(f"run log loss must be finite at step {rec.step}")
        self.records.append(rec)

    def losses(self) -> list[float]:
        return [r.loss for r in self.records]

    def to_csv(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as f:
            w = csv.writer(f)
            w.writerow(["step", "stage", "loss", "lr", "tokens", "seconds"])
            for r in self.records:
                w.writerow([r.step, r.stage, repr(r.loss), repr(r.lr), r.tokens,
                            f"{r.seconds:.3f}"])

    @classmethod
    def from_csv(cls, path) -> "RunLog":
        log = cls()
        with open(path, newline="", encoding="utf-8") as f:
            for row in csv.DictReader(f):
                log.append(RunRecord(step=int(row["step"]), stage=row["stage"],
                                     loss=float(row["loss"]), lr=float(row["lr"]),
                                     tokens=int(row["tokens"]), seconds=float(row["seconds"])))
        return log


# -- batches ----------------------------------------------------------------------------


def batch_cross_entropy(model: DeskLM, inputs: np.ndarray, labels: np.ndarray) -> Tensor:
    """Masked next-token loss over a (batch, seq) window pair."""
    logits = model.forward_tokens(inputs)
    flat = logits.reshape(inputs.shape[0] * inputs.shape[1], model.config.vocab_size)
    return cross_entropy(flat, labels.reshape(-1), ignore_label=IGNORE)


def train_step(model: DeskLM, batch: tuple[np.ndarray, np.ndarray],
               opt: OptimizerState, lr: float) -> float | None:
    """One optimizer step; returns the pre-update loss, or None when the loss
    went non-finite (caller records a spike and the update is skipped)."""
    inputs, labels = batch
    model.zero_grads()
    try:
        loss = batch_cross_entropy(model, inputs, labels)
        backward(loss)
    except NumericError:
        model.zero_grads()
        return None
    params = model.named_parameters()
    opt.clip_grads(params)
    opt.apply(params, lr)
    return float(loss.item())


# -- curriculum run ------------------------------------------------------------------------


@dataclass
class TrainConfig:
    stages: list[CurriculumStage]
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    batch_size: int = 8
    warmup_steps: int = 10
    final_lr_fraction: float = 0.1
    checkpoint_every: int = 200
    spike_cap: int = 10
    corruption_rate: float = 0.15
    mean_span: float = 3.0
    seed: int = 0

    def __post_init__(self):
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if not self.stages:
            raise ConfigError("train config needs at least one stage")

    def steps_per_stage(self) -> list[int]:
        return [max(1, math.ceil(s.token_budget / (self.batch_size * s.context_length)))
                for s in self.stages]

    def schedule(self) -> Schedule:
        total = sum(self.steps_per_stage())
        warmup = min(self.warmup_steps, max(total - 1, 0))
        return Schedule(warmup_steps=warmup, total_steps=total,
                        peak_lr=self.optimizer.peak_lr,
                        final_lr_fraction=self.final_lr_fraction)


_DOC_CHUNK = 64  # documents pulled per sampler call; fixed so replay is exact


def _stage_windows(stage: CurriculumStage, cfg: TrainConfig, vocab):
    """Endless stream of (context_length + 1)-token windows for one stage."""
    stage_index = cfg.stages.index(stage)
    sampler = MixtureSampler(stage, seed=_derive(cfg.seed, stage_index, 0))

    def docs():
        while True:
            for _, doc in sampler.draw(_DOC_CHUNK):
                yield vocab.encode(doc)

    return pack_sequences(docs(), stage.context_length + 1, vocab)


def _derive(seed: int, *tags: int) -> int:
    return int(np.random.SeedSequence([int(seed)] + [int(t) for t in tags]).generate_state(1)[0])


def _next_token_batch(windows, masks, vocab) -> tuple[np.ndarray, np.ndarray]:
    w = np.stack(windows)
    m = np.stack(masks)
    inputs = w[:, :-1]
    labels = np.where(m[:, 1:], w[:, 1:], IGNORE)
    labels = np.where(labels == vocab.pad, IGNORE, labels)
    return inputs, labels


def _span_corruption_batch(windows, masks, vocab, cfg: TrainConfig,
                           seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Decoder-style span corruption: sequence = corrupted ++ target, loss on
    the target region only."""
    width = windows[0].shape[0]  # context_length + 1
    overhead = 1.0 + 2.0 * cfg.corruption_rate / cfg.mean_span
    usable = max(2, int((width - 2) / overhead))
    inputs = np.full((len(windows), width - 1), vocab.pad, dtype=np.int64)
    labels = np.full((len(windows), width - 1), IGNORE, dtype=np.int64)
    for i, (w, m) in enumerate(zip(windows, masks)):
        toks = [int(t) for t in w[m] if int(t) != vocab.eos][:usable]
        if not toks:
            continue
        ex = span_corrupt(toks, cfg.corruption_rate, cfg.mean_span,
                          seed=_derive(seed, i), vocab=vocab)
        seq = ex.corrupted + ex.target
        seq = seq[:width]
        row = np.array(seq, dtype=np.int64)
        inputs[i, :len(seq) - 1] = row[:-1]
        lab = np.full(len(seq) - 1, IGNORE, dtype=np.int64)
        target_from = max(len(ex.corrupted) - 1, 0)
        lab[target_from:] = row[1:][target_from:]
        labels[i, :len(seq) - 1] = lab
    if (labels == IGNORE).all():
        # degenerate batch (all-empty windows): fall back to next-token form
        return _next_token_batch(windows, masks, vocab)
    return inputs, labels


def train_run(model: DeskLM, cfg: TrainConfig, out_dir,
              resume: bool = False, max_steps: int | None = None) -> tuple[DeskLM, RunLog]:
    """Execute the curriculum stages in order, checkpointing at stage
    boundaries and every checkpoint_every steps; emits the run log CSV."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    ckpt_path = out / "train_state.ckpt"
    vocab = model.vocab
    for stage in cfg.stages:
        if stage.context_length + 1 > model.config.max_context:
            raise ConfigError(
                f"stage {stage.stage_id!r}: context_length {stage.context_length} + 1 "
                f"exceeds model max_context {model.config.max_context}")

    opt = OptimizerState(model.named_parameters(), cfg.optimizer)
    schedule = cfg.schedule()
    steps_per_stage = cfg.steps_per_stage()
    log = RunLog()
    start_stage = 0
    start_step_in_stage = 0
    global_step = 0
    tokens_seen = 0
    spike_count = 0
    loss_window: list[float] = []

    if resume:
        if not ckpt_path.exists():
            raise ConfigError(f"resume requested but {ckpt_path} does not exist")
        restored, ckpt = DeskLM.load(ckpt_path)
        for name, p in model.named_parameters().items():
            p.data = restored.named_parameters()[name].data
        state = ckpt.extra["train"]
        opt.restore(ckpt.tensors, state["opt_step"])
        start_stage = state["stage"]
        start_step_in_stage = state["step_in_stage"]
        global_step = state["global_step"]
        tokens_seen = state["tokens_seen"]
        spike_count = state["spike_count"]
        loss_window = list(state["loss_window"])
        for rec in state["records"]:
            log.append(RunRecord(**rec))
        log.spikes = list(state["spikes"])

    def save_state(path):
        state = {"stage": stage_index, "step_in_stage": step_in_stage,
                 "global_step": global_step, "tokens_seen": tokens_seen,
                 "spike_count": spike_count, "loss_window": loss_window,
                 "opt_step": opt.step_count,
                 "records": [asdict(r) for r in log.records],
                 "spikes": log.spikes}
        model.save(path, extra_tensors=opt.tensors(), extra={"train": state})

    t0 = time.monotonic()
    stage_index = start_stage
    step_in_stage = start_step_in_stage
    stopped = False
    for stage_index in range(start_stage, len(cfg.stages)):
        stage = cfg.stages[stage_index]
        windows = _stage_windows(stage, cfg, vocab)
        obj_rng = np.random.default_rng(
            np.random.SeedSequence([cfg.seed, stage_index, 0x0B7]))
        stage_steps = steps_per_stage[stage_index]
        # replay the consumed prefix of the stage streams after a resume
        skip = start_step_in_stage if stage_index == start_stage else 0
        for _ in range(skip):
            for _ in range(cfg.batch_size):
                next(windows)
            obj_rng.random()
        step_in_stage = skip

        while step_in_stage < stage_steps:
            if max_steps is not None and global_step >= max_steps:
                stopped = True
                break
            batch_windows, batch_masks = [], []
            for _ in range(cfg.batch_size):
                w, m = next(windows)
                batch_windows.append(w)
                batch_masks.append(m)
            span_frac = stage.objective_mix.get("span_corruption", 0.0)
            use_span = obj_rng.random() < span_frac
            if use_span:
                batch = _span_corruption_batch(
                    batch_windows, batch_masks, vocab, cfg,
                    seed=_derive(cfg.seed, stage_index, step_in_stage, 1))
            else:
                batch = _next_token_batch(batch_windows, batch_masks, vocab)

            lr = lr_at(min(global_step, schedule.total_steps), schedule)
            loss = train_step(model, batch, opt, lr)
            step_in_stage += 1
            global_step += 1
            tokens_seen += cfg.batch_size * stage.context_length

            if loss is None or detect_spike(loss_window, loss):
                spike_count += 1
                log.spikes.append({"step": global_step, "stage": stage.stage_id,
                                   "loss": None if loss is None else loss})
                if spike_count > cfg.spike_cap:
                    save_state(ckpt_path)
                    log.to_csv(out / "runlog.csv")
                    raise DeskLMError(
                        f"training halted: {spike_count} loss spikes exceed cap "
                        f"{cfg.spike_cap} (last at step {global_step})")
                if loss is None:
                    continue
            loss_window.append(loss)
            if len(loss_window) > 64:
                loss_window.pop(0)
            log.append(RunRecord(step=global_step, stage=stage.stage_id, loss=loss,
                                 lr=lr, tokens=tokens_seen,
                                 seconds=time.monotonic() - t0))
            if global_step % cfg.checkpoint_every == 0:
                save_state(ckpt_path)
        if stopped:
            break
        save_state(ckpt_path)  # stage boundary

    save_state(ckpt_path)
    log.to_csv(out / "runlog.csv")
    return model, log


# -- SFT fine-tuning -----------------------------------------------------------------------


def sft_batches(examples: list[SftExample], vocab, batch_size: int, steps: int, seed: int):
    """Seeded sampler over formatted SFT examples, padded per batch."""
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 0x5F7]))
    formatted = [format_sft(e, vocab) for e in examples]
    for _ in range(steps):
        picks = rng.integers(0, len(formatted), size=batch_size)
        toks = [formatted[i][0] for i in picks]
        masks = [formatted[i][1] for i in picks]
        width = max(len(t) for t in toks)
        inputs = np.full((batch_size, width - 1), vocab.pad, dtype=np.int64)
        labels = np.full((batch_size, width - 1), IGNORE, dtype=np.int64)
        for r, (t, m) in enumerate(zip(toks, masks)):
            inputs[r, :len(t) - 1] = t[:-1]
            lab = np.where(m[1:], t[1:], IGNORE)
            labels[r, :len(t) - 1] = lab
        yield inputs, labels


def train_sft(model: DeskLM, examples: list[SftExample], steps: int,
              opt_cfg: OptimizerConfig, batch_size: int = 4, seed: int = 0,
              warmup_steps: int = 5) -> list[float]:
    """Fine-tune on SFT examples (loss on responses only); returns step losses."""
    opt = OptimizerState(model.named_parameters(), opt_cfg)
    schedule = Schedule(warmup_steps=min(warmup_steps, steps - 1), total_steps=steps,
                        peak_lr=opt_cfg.peak_lr, final_lr_fraction=0.1)
    losses = []
    for step, batch in enumerate(sft_batches(examples, model.vocab, batch_size, steps, seed)):
        loss = train_step(model, batch, opt, lr_at(step, schedule))
        if loss is not None:
            losses.append(loss)
    return losses
