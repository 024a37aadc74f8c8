"""Ground-truth user behaviour behind the simulator and the request generator.

Each user has a latent preference distribution over ``K`` video-duration
categories and a daily mood drawn around it. For an exposed video of
category ``k`` the long-play probability is

    sigmoid(match * (K * mood_k - 1) - satiation * (K * share_k - 1))

where ``share_k`` is the category's share of the request's slate, so
over-exposing a category the user is lukewarm about costs engagement. A
user active today returns tomorrow with probability
``sigmoid(return_bias + return_slope * (usage / reference_usage - 1))``;
an inactive user comes back with probability ``reactivation``.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from .decision import validate_quotas
from .encoding import SequenceSpec
from .errors import ConfigError
from .nn import sigmoid

HOURS = 24
DEVICES = 3


@dataclass
class SimConfig:
    user_count: int = 2000
    day_count: int = 7
    requests_per_day: int = 5
    candidate_pool: int = 40
    slate_size: int = 10
    category_count: int = 3
    history_length: int = 8
    base_shares: list[float] | None = None
    quota_deltas: list[float] | None = None
    preference_concentration: float = 0.6
    mood_concentration: float = 3.0
    match_sharpness: float = 3.0
    satiation: float = 0.8
    long_play_seconds: list[float] | None = None
    short_play_seconds: float = 5.0
    return_bias: float = 1.0
    return_slope: float = 3.0
    reactivation: float = 0.3
    population_seed: int = 0
    seed: int = 0

    def __post_init__(self):
        k = self.category_count
        if k < 1 or self.slate_size < 1 or self.user_count < 1 or self.day_count < 1:
            raise ConfigError("category_count, slate_size, user_count and day_count must be >= 1")
        if self.requests_per_day < 0 or self.history_length < 0:
            raise ConfigError("requests_per_day and history_length must be >= 0")
        if self.candidate_pool < self.slate_size:
            raise ConfigError("candidate_pool must hold at least one slate")
        if self.base_shares is None:
            self.base_shares = [1.0 / k] * k
        if self.quota_deltas is None:
            self.quota_deltas = [0.2] * k
        if self.long_play_seconds is None:
            self.long_play_seconds = [60.0] * k
        if len(self.base_shares) != k or len(self.long_play_seconds) != k:
            raise ConfigError("base_shares and long_play_seconds need one entry per category")
        if not 0 <= self.reactivation <= 1:
            raise ConfigError("reactivation must be a probability")
        validate_quotas(np.asarray(self.base_shares), np.asarray(self.quota_deltas))

    def to_dict(self) -> dict:
        return asdict(self)

    @property
    def reference_usage(self) -> float:
        """Expected daily seconds for a neutral user under the default mix."""
        long_mean = float(np.dot(self.base_shares, self.long_play_seconds))
        return self.requests_per_day * self.slate_size * 0.5 * (long_mean + self.short_play_seconds)

    def sequence_specs(self) -> tuple[SequenceSpec, ...]:
        return (SequenceSpec("history", self.category_count, self.history_length),
                SequenceSpec("hour", HOURS, 1), SequenceSpec("device", DEVICES, 1))


@dataclass
class Population:
    preference: np.ndarray  # (U, K)
    device: np.ndarray  # (U,)
    base_hour: np.ndarray = field(repr=False)  # (U,)

    @classmethod
    def draw(cls, cfg: SimConfig, preference: np.ndarray | None = None) -> "Population":
        rng = np.random.default_rng([cfg.population_seed, 11])
        k = cfg.category_count
        pref = rng.dirichlet(np.full(k, cfg.preference_concentration), size=cfg.user_count)
        if preference is not None:
            pref = np.broadcast_to(np.asarray(preference, dtype=float), pref.shape).copy()
        device = rng.integers(DEVICES, size=cfg.user_count)
        hour = rng.integers(HOURS, size=cfg.user_count)
        return cls(pref, device, hour)

    def __len__(self) -> int:
        return self.preference.shape[0]


def draw_mood(pop: Population, cfg: SimConfig, rng: np.random.Generator) -> np.ndarray:
    k = cfg.category_count
    alpha = cfg.mood_concentration * k * (pop.preference + 0.02)
    g = rng.standard_gamma(alpha)
    return g / g.sum(axis=1, keepdims=True)


def long_play_probability(mood: np.ndarray, exposure_share: np.ndarray, cfg: SimConfig) -> np.ndarray:
    k = cfg.category_count
    return sigmoid(cfg.match_sharpness * (k * mood - 1.0) - cfg.satiation * (k * exposure_share - 1.0))


def return_probability(usage: np.ndarray, cfg: SimConfig) -> np.ndarray:
    return sigmoid(cfg.return_bias + cfg.return_slope * (usage / cfg.reference_usage - 1.0))


def sample_categories(probs: np.ndarray, uniforms: np.ndarray) -> np.ndarray:
    """Inverse-CDF categorical draws, one per uniform; ``probs`` is (U, K), ``uniforms`` (U, L)."""
    cdf = np.cumsum(probs, axis=1)
    cdf[:, -1] = 1.0
    return (uniforms[:, :, None] >= cdf[:, None, :-1]).sum(axis=2)


def fill_slate(pool_category: np.ndarray, quotas: np.ndarray, slate_size: int) -> np.ndarray:
    """Select ``slate_size`` pool positions honouring per-category quotas.

    Within a category the earliest (best-ranked) candidates win; any
    shortfall is filled with the best-ranked leftovers.
    """
    k = quotas.shape[1]
    onehot = pool_category[:, :, None] == np.arange(k)[None, None, :]
    rank_in_cat = np.cumsum(onehot, axis=1)
    chosen = (onehot & (rank_in_cat <= quotas[:, None, :])).any(axis=2)
    shortfall = slate_size - chosen.sum(axis=1)
    leftover_rank = np.cumsum(~chosen, axis=1)
    chosen |= (~chosen) & (leftover_rank <= shortfall[:, None])
    return chosen
