"""Synthetic audio-visual episodes that need both streams to answer.

Each episode has a visual and an audio symbol stream of T steps.  The question
names a visual symbol X that occurs exactly once, at t*; the answer is the
audio symbol at t*.  Audio is drawn independently of vision, so neither
stream alone determines the answer.

Frame features are not stored: :class:`EncoderBank` regenerates them from seeds.
"""

from __future__ import annotations

import json
import os
from collections import Counter
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .anchors import SegmentRef
from .errors import ContractError, DataError
from .interleave import ANSWER_ID
from .sequence import (EOA_ID, HybridSequence, LatentBudget, LatentState, Stop, TextToken, Trigger,
                       dump, parse_dump)

WHICH_SOUND_ID = 5
LOOK_ID = 6
SYMBOL_BASE = 8
FORMAT = "avreason-episodes/1"


@dataclass(frozen=True)
class WorldConfig:
    T: int = 24
    visual_alphabet: int = 8
    audio_alphabet: int = 8
    noise_sigma: float = 0.05
    frame_rate: float = 1.0
    seed: int = 0
    feature_dim: int = 16

    def __post_init__(self):
        if self.visual_alphabet < 2 or self.audio_alphabet < 2:
            raise ContractError("alphabets need at least 2 symbols")
        if self.T < self.visual_alphabet:
            raise ContractError(f"T={self.T} is smaller than the visual alphabet {self.visual_alphabet}")
        if self.noise_sigma < 0 or self.frame_rate <= 0 or self.feature_dim < 1:
            raise ContractError("noise_sigma >= 0, frame_rate > 0 and feature_dim >= 1 are required")

    @property
    def vocab_needed(self) -> int:
        return SYMBOL_BASE + self.visual_alphabet + self.audio_alphabet

    def as_dict(self) -> dict:
        return asdict(self)


def visual_token(config: WorldConfig, symbol: int) -> int:
    return SYMBOL_BASE + symbol


def audio_token(config: WorldConfig, symbol: int) -> int:
    return SYMBOL_BASE + config.visual_alphabet + symbol


@dataclass
class Episode:
    config: WorldConfig
    index: int
    seed: int
    visual: list[int]
    audio: list[int]
    query: int
    t_star: int
    answer: int  # audio symbol at t*
    question: list[int]
    trajectory: list  # generated-region template (latent states carry no vectors)
    segments: list[SegmentRef] = field(default_factory=list)

    @property
    def answer_token(self) -> int:
        return audio_token(self.config, self.answer)

    def sequence(self, visual=None, audio=None) -> HybridSequence:
        """The full trajectory, optionally with prompt features attached."""
        seq = HybridSequence(list(self.question), list(self.trajectory), len(self.visual), len(self.audio))
        seq.visual, seq.audio = visual, audio
        return seq

    def prompt(self, visual=None, audio=None) -> HybridSequence:
        seq = self.sequence(visual, audio)
        seq.generated = []
        return seq


def _episode_seed(seed: int, index: int) -> int:
    return int(np.random.SeedSequence([seed & (2**64 - 1), index]).generate_state(1, np.uint64)[0])


def trajectory_template(answer_tok: int, budget: LatentBudget) -> list:
    gen: list = [TextToken(LOOK_ID), Trigger()]
    gen += [LatentState(k) for k in range(budget.total)]
    gen += [Stop(), TextToken(ANSWER_ID), TextToken(answer_tok, answer=True), TextToken(EOA_ID)]
    return gen


def generate_episode(config: WorldConfig, index: int, budget: LatentBudget = LatentBudget()) -> Episode:
    seed = _episode_seed(config.seed, index)
    rng = np.random.default_rng(seed)
    T = config.T
    query = int(rng.integers(config.visual_alphabet))
    t_star = int(rng.integers(T))
    others = rng.integers(config.visual_alphabet - 1, size=T)
    visual = np.where(others >= query, others + 1, others)
    visual[t_star] = query
    audio = rng.integers(config.audio_alphabet, size=T)
    answer = int(audio[t_star])
    fr = config.frame_rate
    lo, hi = max(0.0, (t_star - 1) / fr), min(T / fr, (t_star + 1) / fr)
    segments = [SegmentRef("visual", lo, hi, f"v{t_star}"), SegmentRef("audio", lo, hi, f"a{t_star}")]
    return Episode(config, index, seed, visual.tolist(), audio.tolist(), query, t_star, answer,
                   [WHICH_SOUND_ID, visual_token(config, query)],
                   trajectory_template(audio_token(config, answer), budget), segments)


def generate_episodes(config: WorldConfig, start: int, count: int, budget: LatentBudget = LatentBudget(),
                      threads: int | None = None) -> list[Episode]:
    """Episodes ``start .. start+count-1`` in index order, optionally on several threads."""
    if threads is None:
        threads = int(os.environ.get("LOMNI_THREADS", os.cpu_count() or 1))
    if threads < 1:
        raise ContractError("thread count must be positive")
    indices = range(start, start + count)
    if threads == 1:
        return [generate_episode(config, i, budget) for i in indices]
    with ThreadPoolExecutor(threads) as pool:
        return list(pool.map(lambda i: generate_episode(config, i, budget), indices))


class EncoderBank:
    """Frozen stand-in encoders: fixed unit base vector per symbol plus seeded noise."""

    def __init__(self, config: WorldConfig, seed: int = 0):
        # fixed apart from the dataset seed, so every split sees the same encoders
        self.config = config
        self.seed = seed
        rng = np.random.default_rng([self.seed & (2**64 - 1), 0xBA5E])
        bases = []
        for n in (config.visual_alphabet, config.audio_alphabet):
            b = rng.normal(size=(n, config.feature_dim))
            bases.append(b / np.linalg.norm(b, axis=1, keepdims=True))
        self.visual_base, self.audio_base = bases

    @property
    def frame_rate(self) -> float:
        return self.config.frame_rate

    def encode(self, episode: Episode) -> tuple[np.ndarray, np.ndarray]:
        out = []
        for m, (base, stream) in enumerate(((self.visual_base, episode.visual), (self.audio_base, episode.audio))):
            # one noise stream per (episode, modality); row t is the noise of step t
            rng = np.random.default_rng([self.seed & (2**64 - 1), episode.seed, m])
            noise = rng.normal(0.0, 1.0, size=(len(stream), self.config.feature_dim)) * self.config.noise_sigma
            out.append(base[np.asarray(stream)] + noise)
        return out[0], out[1]


def blind_floor(config: WorldConfig) -> float:
    return 1.0 / config.audio_alphabet


def audio_only_guess(audio: Sequence[int]) -> int:
    counts = Counter(audio)
    best = max(counts.values())
    return min(s for s, c in counts.items() if c == best)


def audio_only_oracle(episodes: Sequence[Episode]) -> float:
    """Accuracy of always answering the most frequent audio symbol (lowest id on ties)."""
    if not episodes:
        raise ContractError("audio-only oracle needs at least one episode")
    return sum(audio_only_guess(e.audio) == e.answer for e in episodes) / len(episodes)


# ---------------------------------------------------------------- file format

def _record(e: Episode) -> dict:
    return {
        "format": FORMAT,
        "config": e.config.as_dict(),
        "index": e.index,
        "seed": e.seed,
        "visual": e.visual,
        "audio": e.audio,
        "query": e.query,
        "t_star": e.t_star,
        "answer": e.answer,
        "question": e.question,
        "trajectory": dump(e.trajectory).splitlines(),
        "segments": [asdict(s) for s in e.segments],
    }


def write_dataset(episodes: Iterable[Episode], path) -> int:
    n = 0
    with open(path, "w", encoding="utf-8") as fh:
        for e in episodes:
            fh.write(json.dumps(_record(e), sort_keys=True) + "\n")
            n += 1
    return n


def _parse(rec: dict) -> Episode:
    if rec.get("format") != FORMAT:
        raise ValueError(f"unknown format {rec.get('format')!r}")
    names = {f.name for f in fields(WorldConfig)}
    cfg = WorldConfig(**{k: v for k, v in rec["config"].items() if k in names})
    trajectory = parse_dump("\n".join(rec["trajectory"]))
    segments = [SegmentRef(**s) for s in rec["segments"]]
    ep = Episode(cfg, int(rec["index"]), int(rec["seed"]), list(rec["visual"]), list(rec["audio"]),
                 int(rec["query"]), int(rec["t_star"]), int(rec["answer"]), list(rec["question"]),
                 trajectory, segments)
    if len(ep.visual) != cfg.T or len(ep.audio) != cfg.T:
        raise ValueError("stream length differs from the configured T")
    if ep.audio[ep.t_star] != ep.answer or ep.visual[ep.t_star] != ep.query:
        raise ValueError("answer or query inconsistent with the streams")
    return ep


def read_dataset(path, expected: WorldConfig | None = None) -> list[Episode]:
    path = Path(path)
    if not path.exists():
        raise DataError(f"{path}: no such dataset")
    episodes: list[Episode] = []
    config = expected
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                ep = _parse(json.loads(line))
            except DataError as exc:
                raise DataError(f"{path}:{lineno}: {exc}") from None
            except (ValueError, KeyError, TypeError, ContractError) as exc:
                raise DataError(f"{path}:{lineno}: malformed episode record ({exc})") from None
            if config is None:
                config = ep.config
            elif ep.config != config:
                raise DataError(f"{path}:{lineno}: world config differs from {config}")
            episodes.append(ep)
    if not episodes:
        raise DataError(f"{path}: dataset is empty")
    return episodes
