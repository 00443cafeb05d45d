"""Supervised training on teacher-forced trajectories, and evaluation by decoding."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import backbone as bb
from . import tensor as tc
from .anchors import anchors_from_projected
from .errors import ContractError, NumericError
from .interleave import decode, run_teacher_forced
from .losses import LossBreakdown, LossWeights, combine, latent_loss, sync_loss, sync_pairs, tau_of, text_loss, total_loss
from .ospe import assign_timestamps, integer_plan
from .sequence import LatentBudget
from .synthworld import EncoderBank, Episode, audio_only_oracle, audio_token, blind_floor

METRICS_HEADER = "step,text,latent,sync,total,lr,tau"
SYNC_SOURCES = ("input", "hidden")


@dataclass(frozen=True)
class TrainConfig:
    base_lr: float = 3e-4
    warmup_fraction: float = 0.05
    total_steps: int = 750
    grad_accumulation: int = 12
    batch_size: int = 1
    lambda1: float = 0.005
    lambda2: float = 1.0
    clip_norm: float = 1.0
    eval_every: int = 0
    checkpoint: str | None = None
    seed: int = 0
    use_ospe: bool = True
    anchor_teacher_forcing: bool = False
    sync_source: str = "input"  # "input": projected prompt features; "hidden": last-layer states there

    def __post_init__(self):
        if self.sync_source not in SYNC_SOURCES:
            raise ContractError(f"sync_source must be one of {SYNC_SOURCES}")
        if not 0.0 <= self.warmup_fraction < 1.0:
            raise ContractError("warmup_fraction must lie in [0, 1)")
        if self.grad_accumulation < 1 or self.total_steps < 1:
            raise ContractError("grad_accumulation and total_steps must be at least 1")
        if self.batch_size != 1:
            raise ContractError("only batch size 1 is supported")
        if self.base_lr < 0 or self.clip_norm <= 0:
            raise ContractError("base_lr must be >= 0 and clip_norm > 0")

    @classmethod
    def paper_hparams(cls, **overrides) -> "TrainConfig":
        return cls(**{**dict(base_lr=1e-5, warmup_fraction=0.05, lambda1=0.005, lambda2=1.0,
                             grad_accumulation=12, batch_size=1), **overrides})

    @property
    def weights(self) -> LossWeights:
        return LossWeights(self.lambda1, self.lambda2)

    @property
    def warmup_steps(self) -> int:
        return math.ceil(self.warmup_fraction * self.total_steps)

    def as_dict(self) -> dict:
        return asdict(self)


@dataclass
class OptimState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_model(cls, state: bb.ModelState) -> "OptimState":
        return cls({k: np.zeros_like(p.data) for k, p in state.params.items()},
                   {k: np.zeros_like(p.data) for k, p in state.params.items()})


def lr_at(step: int, config: TrainConfig) -> float:
    warm = config.warmup_steps
    if warm == 0:
        return config.base_lr
    return config.base_lr * min(1.0, (step + 1) / warm)


# ---------------------------------------------------------------- losses per episode

def episode_loss(state: bb.ModelState, episode: Episode, bank: EncoderBank, budget: LatentBudget,
                 weights: LossWeights, use_ospe: bool = True, anchor_teacher_forcing: bool = False,
                 keep_attention: bool = False, anchors=None, sync_source: str = "input"):
    """Teacher-forced pass over one trajectory; returns ``(total Tensor, LossBreakdown, RunResult)``.

    Anchors are targets, not differentiated: by default they are pooled from
    the current projections, or ``anchors`` (an AnchorSequence) is used as given.
    """
    fv, fa = bank.encode(episode)
    seq = episode.sequence(fv, fa)
    plan = assign_timestamps(seq, bank.frame_rate, episode.segments, budget)
    run_plan = plan if use_ospe else integer_plan(plan)
    nv, na = seq.n_visual, seq.n_audio
    if anchors is None and budget.total:
        # anchors come from the projected prompt frames and are not differentiated
        hv, ha = bb.project_features(fv, fa, state)
        anchors = anchors_from_projected(episode.segments, hv.data, ha.data, bank.frame_rate, budget)
    fed = [anchors.anchors] if anchor_teacher_forcing and anchors is not None else None
    run = run_teacher_forced(state, seq, run_plan, budget, anchors=fed, keep_attention=keep_attention)
    text, n_text = text_loss(run.logits, seq)
    if run.latents:
        lat = run.latents[0] if len(run.latents) == 1 else tc.concat(run.latents)
        target = np.concatenate([anchors.anchors] * len(run.latents))
        latent = latent_loss(lat, target)
    else:
        latent = tc.Tensor(0.0)
    # synchronization pairs keep physical time even when attention uses integer positions
    feats = run.inputs if sync_source == "input" else run.hidden
    pairs = sync_pairs(tc.index(feats, slice(0, nv)), tc.index(feats, slice(nv, nv + na)), plan, 0, nv)
    sync = sync_loss(pairs, tau_of(state["sync.log_tau"]))
    total = combine(text, latent, sync, weights)
    breakdown = total_loss(text.item(), latent.item(), sync.item(), weights, n_text)
    return total, breakdown, run


def accumulate_gradients(state: bb.ModelState, episodes: Sequence[Episode], bank: EncoderBank,
                         budget: LatentBudget, config: TrainConfig, scale: float | None = None) -> list[LossBreakdown]:
    """Add each episode's gradient (times ``scale``, default 1/accumulation) into ``.grad``."""
    scale = 1.0 / config.grad_accumulation if scale is None else scale
    out = []
    params = state.parameters()
    for ep in episodes:
        # each episode's gradient is formed in a fresh buffer, then added to the running sum
        held = [p.grad for p in params]
        state.zero_grad()
        try:
            with tc.Tape() as tape:
                total, breakdown, _ = episode_loss(state, ep, bank, budget, config.weights, config.use_ospe,
                                                   config.anchor_teacher_forcing, sync_source=config.sync_source)
            tape.backward(total, np.asarray(scale))
        except NumericError as exc:
            for p, g in zip(params, held):
                p.grad = g
            raise NumericError(f"episode {ep.index}: {exc}") from None
        for p, g in zip(params, held):
            if g is not None:
                p.grad = g if p.grad is None else g + p.grad
        out.append(breakdown)
    return out


def global_norm(state: bb.ModelState) -> float:
    return math.sqrt(sum(float((p.grad * p.grad).sum()) for p in state.parameters() if p.grad is not None))


def adam_update(state: bb.ModelState, optim: OptimState, lr: float, clip_norm: float) -> float:
    """Clip by global norm, then one bias-corrected adaptive-moment step.  Returns the pre-clip norm."""
    norm = global_norm(state)
    if not math.isfinite(norm):
        raise NumericError("gradient norm is not finite")
    factor = min(1.0, clip_norm / norm) if norm > 0 else 1.0
    optim.step += 1
    b1, b2 = optim.beta1, optim.beta2
    c1, c2 = 1.0 - b1 ** optim.step, 1.0 - b2 ** optim.step
    for name, p in state.params.items():
        if p.grad is None:
            continue
        g = p.grad * factor
        m = optim.m[name] = b1 * optim.m[name] + (1 - b1) * g
        v = optim.v[name] = b2 * optim.v[name] + (1 - b2) * g * g
        if lr != 0.0:
            p.data = p.data - lr * (m / c1) / (np.sqrt(v / c2) + optim.eps)
    return norm


def mean_breakdown(parts: Sequence[LossBreakdown], weights: LossWeights) -> LossBreakdown:
    n = len(parts)
    return total_loss(sum(b.text for b in parts) / n, sum(b.latent for b in parts) / n,
                      sum(b.sync for b in parts) / n, weights, sum(b.n_text for b in parts))


def episode_order(n_episodes: int, step: int, config: TrainConfig) -> list[int]:
    """Indices of the episodes consumed by optimizer step ``step``.

    Episodes are visited in a fresh seeded permutation per pass over the data.
    """
    per = config.grad_accumulation
    out = []
    for j in range(step * per, (step + 1) * per):
        epoch, pos = divmod(j, n_episodes)
        perm = np.random.default_rng([config.seed, epoch]).permutation(n_episodes)
        out.append(int(perm[pos]))
    return out


def train_step(state: bb.ModelState, optim: OptimState, episodes: Sequence[Episode], config: TrainConfig,
               bank: EncoderBank, budget: LatentBudget, step: int | None = None) -> LossBreakdown:
    step = optim.step if step is None else step
    state.zero_grad()
    parts = accumulate_gradients(state, episodes, bank, budget, config)
    breakdown = mean_breakdown(parts, config.weights)
    adam_update(state, optim, lr_at(step, config), config.clip_norm)
    state.zero_grad()
    if not state.is_finite():
        raise NumericError(f"parameters became non-finite at step {step}")
    return breakdown


def format_metrics(step: int, b: LossBreakdown, lr: float, tau: float) -> str:
    return f"{step},{b.text!r},{b.latent!r},{b.sync!r},{b.total!r},{lr!r},{tau!r}"


def train(state: bb.ModelState, optim: OptimState, episodes: Sequence[Episode], config: TrainConfig,
          bank: EncoderBank, budget: LatentBudget = LatentBudget(), steps: int | None = None,
          log: Callable[[str], None] | None = None) -> list[LossBreakdown]:
    """Run optimizer steps from ``optim.step`` up to ``steps`` (default: the configured total)."""
    if not episodes:
        raise ContractError("training needs at least one episode")
    end = config.total_steps if steps is None else steps
    history = []
    while optim.step < end:
        step = optim.step
        batch = [episodes[i] for i in episode_order(len(episodes), step, config)]
        b = train_step(state, optim, batch, config, bank, budget, step)
        history.append(b)
        if log is not None:
            log(format_metrics(step, b, lr_at(step, config), float(tau_of(state["sync.log_tau"]).item())))
    return history


def moving_average(values: Sequence[float], window: int = 50) -> np.ndarray:
    v = np.asarray(values, dtype=np.float64)
    if len(v) < window:
        return np.zeros(0)
    c = np.concatenate([[0.0], np.cumsum(v)])
    return (c[window:] - c[:-window]) / window


# ---------------------------------------------------------------- evaluation

@dataclass
class EvalReport:
    accuracy: float
    av_ratio_latent: float
    av_ratio_text: float
    episodes: int
    blind_floor: float
    audio_only_oracle: float

    def as_dict(self) -> dict:
        return asdict(self)

    def format(self) -> str:
        return "\n".join(f"{k}={v!r}" for k, v in self.as_dict().items())


def av_ratios(trace) -> tuple[float, float]:
    """Mean AV attention mass at latent-state positions and at text positions."""
    lat = [m.mean() for tag, m in zip(trace.tags, trace.av_mass) if tag.startswith("latent")]
    txt = [m.mean() for tag, m in zip(trace.tags, trace.av_mass) if tag == "text"]
    return (float(np.mean(lat)) if lat else float("nan"), float(np.mean(txt)) if txt else float("nan"))


def evaluate(state: bb.ModelState, episodes: Sequence[Episode], bank: EncoderBank,
             budget: LatentBudget = LatentBudget(), use_ospe: bool = True, max_text: int = 8) -> EvalReport:
    """Greedy-decode every episode without its segment annotation and score the answer.

    The answer slot is restricted to the audio-symbol tokens, so every episode
    yields exactly one scored answer.
    """
    if not episodes:
        raise ContractError("evaluation needs at least one episode")
    config = episodes[0].config
    alphabet = [audio_token(config, s) for s in range(config.audio_alphabet)]
    correct = 0
    lat_sum = lat_n = txt_sum = txt_n = 0.0
    for ep in episodes:
        fv, fa = bank.encode(ep)
        seq, trace = decode(state, ep.prompt(fv, fa), budget, max_text, frame_rate=bank.frame_rate,
                            use_ospe=use_ospe, trace=True, answer_tokens=alphabet)
        answer = seq.answer()
        correct += bool(answer) and answer[0] == ep.answer_token
        for tag, m in zip(trace.tags, trace.av_mass):
            if tag.startswith("latent"):
                lat_sum, lat_n = lat_sum + m.mean(), lat_n + 1
            elif tag == "text":
                txt_sum, txt_n = txt_sum + m.mean(), txt_n + 1
    return EvalReport(correct / len(episodes),
                      float(lat_sum / lat_n) if lat_n else float("nan"),
                      float(txt_sum / txt_n) if txt_n else float("nan"),
                      len(episodes), blind_floor(config), audio_only_oracle(episodes))
