"""Soft actor-critic with a pluggable state feature extractor.

Extractor kinds:

``flatten``
    raw grid values (vanilla SAC)
``deeponet_random``
    freshly initialized DeepONet features (NOSAC)
``deeponet_pretrained``
    DeepONet features loaded from a backstepping-imitation checkpoint
    (NOSAC_training)

The actor and each critic own separate extractor parameters, all updated by
their own losses. Target critics copy the critics at construction and only
change through :func:`polyak_update`.
"""

from __future__ import annotations

import csv
import io
import logging
import math
from dataclasses import dataclass, field, fields

import numpy as np

from .deeponet import DeepONetModel, DeepONetShape
from .errors import (CheckpointFormatError, ConfigError, InvalidArgumentError,
                     NotReadyError, NumericalFailureError)
from .nn import DenseNet, checkpoint_bytes, make_optimizer, parse_checkpoint, squashed_gaussian_sample
from .numerics import Rng, derive_seed
from .pde_env import PdeEnv, l2_norm

log = logging.getLogger(__name__)

EXTRACTORS = ("flatten", "deeponet_random", "deeponet_pretrained")
VARIANT_EXTRACTOR = {"sac": "flatten", "nosac": "deeponet_random",
                     "nosac_training": "deeponet_pretrained"}

# derive_seed stream labels
_ENV_STREAM, _BUFFER_STREAM, _POLICY_STREAM, _INIT_STREAM = range(4)


@dataclass(frozen=True)
class SacConfig:
    gamma_rl: float = 0.99
    alpha: float = 0.2
    tau: float = 0.005
    actor_lr: float = 3e-4
    critic_lr: float = 3e-4
    batch_size: int = 256
    capacity: int = 1_000_000
    total_steps: int = 100_000
    warmup: int = 1000
    grad_steps: int = 1
    extractor: str = "flatten"
    seed: int = 0
    actor_hidden: tuple = (256, 256)
    critic_hidden: tuple = (256, 256)
    optimizer: str = "adam"
    truncation_bootstraps: bool = False

    def __post_init__(self):
        if not 0.0 <= self.gamma_rl < 1.0:
            raise ConfigError(f"discount must lie in [0, 1), got {self.gamma_rl}")
        if not 0.0 < self.tau <= 1.0:
            raise ConfigError(f"polyak coefficient must lie in (0, 1], got {self.tau}")
        if self.alpha < 0:
            raise ConfigError(f"temperature must be non-negative, got {self.alpha}")
        if self.capacity < self.batch_size:
            raise ConfigError("replay capacity is smaller than the batch size")
        if self.extractor not in EXTRACTORS:
            raise ConfigError(f"unknown extractor {self.extractor!r}; expected one of {EXTRACTORS}")
        if self.optimizer not in ("adam", "sgd"):
            raise ConfigError(f"unknown optimizer {self.optimizer!r}")


# ---------------------------------------------------------------------------
# replay buffer


@dataclass
class Transition:
    state: np.ndarray
    action: float
    reward: float
    next_state: np.ndarray
    done: bool


@dataclass
class Batch:
    state: np.ndarray
    action: np.ndarray
    reward: np.ndarray
    next_state: np.ndarray
    done: np.ndarray

    def __len__(self):
        return self.reward.shape[0]


class ReplayBuffer:
    """FIFO ring buffer with uniform sampling (with replacement).

    Storage grows on demand up to ``capacity`` rows.
    """

    def __init__(self, capacity: int, state_dim: int, min_size: int = 1):
        if capacity < 1:
            raise InvalidArgumentError("capacity must be positive")
        self.capacity = int(capacity)
        self.state_dim = state_dim
        self.min_size = max(1, int(min_size))
        self.size = 0
        self.head = 0
        rows = min(self.capacity, 1024)
        self._s = np.zeros((rows, state_dim))
        self._s2 = np.zeros((rows, state_dim))
        self._a = np.zeros(rows)
        self._r = np.zeros(rows)
        self._d = np.zeros(rows)

    def _grow(self):
        # only reached before the first wrap-around, so rows [0, size) are in order
        rows = min(self.capacity, 2 * self._a.shape[0])
        for name in ("_s", "_s2", "_a", "_r", "_d"):
            old = getattr(self, name)
            new = np.zeros((rows,) + old.shape[1:])
            new[: self.size] = old[: self.size]
            setattr(self, name, new)

    def __len__(self):
        return self.size

    def push(self, t: Transition) -> None:
        if self.size == self._a.shape[0] and self.size < self.capacity:
            self._grow()
        i = self.head
        self._s[i] = t.state
        self._s2[i] = t.next_state
        self._a[i] = t.action
        self._r[i] = t.reward
        self._d[i] = float(t.done)
        self.head = (self.head + 1) % self.capacity
        self.size = min(self.size + 1, self.capacity)

    def sample_indices(self, batch_size: int, rng: Rng) -> np.ndarray:
        if self.size < self.min_size:
            raise NotReadyError(f"buffer holds {self.size} transitions, needs {self.min_size}")
        return rng.integers(self.size, size=batch_size)

    def sample(self, batch_size: int, rng: Rng) -> Batch:
        idx = self.sample_indices(batch_size, rng)
        return Batch(self._s[idx], self._a[idx], self._r[idx], self._s2[idx], self._d[idx])

    def items(self) -> list:
        """Transitions from oldest to newest."""
        order = [(self.head - self.size + k) % self.capacity for k in range(self.size)]
        return [Transition(self._s[i].copy(), float(self._a[i]), float(self._r[i]),
                           self._s2[i].copy(), bool(self._d[i])) for i in order]


def replay_push(buffer: ReplayBuffer, transition: Transition) -> None:
    buffer.push(transition)


def replay_sample(buffer: ReplayBuffer, batch_size: int, rng: Rng) -> Batch:
    return buffer.sample(batch_size, rng)


# ---------------------------------------------------------------------------
# networks


class FlattenExtractor:

    def __init__(self, n_points: int):
        self.n_points = n_points
        self.params = []

    @property
    def out_dim(self) -> int:
        return self.n_points

    def features(self, states):
        return np.asarray(states, dtype=float), None

    def backward(self, cache, grad):
        return []

    def set_coefficient(self, coeff) -> None:
        pass

    def copy(self) -> "FlattenExtractor":
        return FlattenExtractor(self.n_points)


class DeepONetExtractor:
    """Branch-times-trunk features of ``(coefficient, state)``."""

    def __init__(self, model: DeepONetModel, coeff):
        self.model = model
        self.coeff = np.asarray(coeff, dtype=float)

    @property
    def params(self) -> list:
        return self.model.feature_params

    @property
    def out_dim(self) -> int:
        return self.model.latent

    def features(self, states):
        return self.model.features_with_cache(self.coeff, states)

    def backward(self, cache, grad):
        return self.model.features_backward(cache, grad)

    def set_coefficient(self, coeff) -> None:
        self.coeff = np.asarray(coeff, dtype=float)

    def copy(self) -> "DeepONetExtractor":
        return DeepONetExtractor(self.model.copy(), self.coeff.copy())


class Critic:
    """``Q(s, a)``: extractor features concatenated with ``a / bound``."""

    def __init__(self, extractor, fc: DenseNet, bound: float):
        self.extractor = extractor
        self.fc = fc
        self.bound = bound

    @property
    def params(self) -> list:
        return self.extractor.params + self.fc.params

    def forward(self, states, actions):
        feats, f_cache = self.extractor.features(states)
        x = np.concatenate([feats, (np.asarray(actions) / self.bound)[:, None]], axis=1)
        q, fc_cache = self.fc.forward(x)
        return q[:, 0], (f_cache, fc_cache, feats.shape[1])

    def backward(self, cache, grad_q, need_params: bool = True):
        """Returns ``(param_grads, dQ/da)``; skips the extractor when not needed."""
        f_cache, fc_cache, n_feat = cache
        fc_grads, grad_in = self.fc.backward(fc_cache, np.asarray(grad_q)[:, None])
        grad_action = grad_in[:, n_feat] / self.bound
        if not need_params:
            return None, grad_action
        ext_grads = self.extractor.backward(f_cache, grad_in[:, :n_feat])
        return ext_grads + fc_grads, grad_action

    def copy(self) -> "Critic":
        return Critic(self.extractor.copy(), self.fc.copy(), self.bound)


class Actor:
    """Extractor, a dense trunk, and a (mean, log_std) head for the squashed Gaussian."""

    def __init__(self, extractor, fc: DenseNet, bound: float):
        self.extractor = extractor
        self.fc = fc
        self.bound = bound

    @property
    def params(self) -> list:
        return self.extractor.params + self.fc.params

    def distribution(self, states):
        feats, f_cache = self.extractor.features(states)
        out, fc_cache = self.fc.forward(feats)
        return out[:, 0], out[:, 1], (f_cache, fc_cache)

    def sample(self, states, noise):
        mean, log_std, cache = self.distribution(states)
        return squashed_gaussian_sample(mean, log_std, noise, self.bound), cache

    def backward(self, cache, grad_mean, grad_log_std):
        f_cache, fc_cache = cache
        grad_out = np.stack([grad_mean, grad_log_std], axis=1)
        fc_grads, grad_feats = self.fc.backward(fc_cache, grad_out)
        return self.extractor.backward(f_cache, grad_feats) + fc_grads

    def act(self, state, rng: Rng | None = None, deterministic: bool = False) -> float:
        mean, log_std, _ = self.distribution(np.asarray(state, dtype=float)[None, :])
        if deterministic:
            return float(self.bound * np.tanh(mean[0]))
        s = squashed_gaussian_sample(mean, log_std, np.array([rng.normal()]), self.bound)
        return float(s.action[0])

    def set_coefficient(self, coeff) -> None:
        self.extractor.set_coefficient(coeff)


@dataclass
class AgentNets:
    actor: Actor
    critic1: Critic
    critic2: Critic
    target1: Critic
    target2: Critic

    @property
    def critics(self):
        return (self.critic1, self.critic2)

    @property
    def targets(self):
        return (self.target1, self.target2)

    def set_coefficient(self, coeff) -> None:
        for net in (self.actor, self.critic1, self.critic2, self.target1, self.target2):
            net.extractor.set_coefficient(coeff)

    # -- persistence ---------------------------------------------------------

    def checkpoint(self) -> tuple:
        nets, scalars = {}, {"bound": self.actor.bound}
        named = {"actor": self.actor, "critic1": self.critic1, "critic2": self.critic2,
                 "target1": self.target1, "target2": self.target2}
        for name, net in named.items():
            nets[name + ".fc"] = net.fc
            ext = net.extractor
            if isinstance(ext, DeepONetExtractor):
                nets.update(ext.model.nets(name + "."))
                scalars.update(ext.model.scalars(name + "."))
            else:
                scalars[name + ".flatten_points"] = ext.n_points
        return nets, scalars

    def to_bytes(self) -> bytes:
        return checkpoint_bytes(*self.checkpoint())

    @classmethod
    def from_bytes(cls, data: bytes, coeff=None) -> "AgentNets":
        nets, scalars = parse_checkpoint(data)
        bound = scalars["bound"]
        parts = {}
        for name in ("actor", "critic1", "critic2", "target1", "target2"):
            if name + ".fc" not in nets:
                raise CheckpointFormatError(f"agent checkpoint lacks {name}.fc")
            if name + ".branch" in nets:
                model = DeepONetModel.from_checkpoint(nets, scalars, name + ".")
                ext = DeepONetExtractor(model, coeff if coeff is not None
                                        else np.zeros(model.n_points))
            else:
                ext = FlattenExtractor(int(scalars[name + ".flatten_points"]))
            cls_ = Actor if name == "actor" else Critic
            parts[name] = cls_(ext, nets[name + ".fc"], bound)
        return cls(**parts)

    def param_digest(self, which: str) -> bytes:
        """Raw bytes of one network's parameters (for change detection)."""
        net = getattr(self, which)
        return b"".join(np.ascontiguousarray(p).tobytes() for p in net.params)


def build_agent(config: SacConfig, n_points: int, bound: float, coeff, rng: Rng,
                pretrained: DeepONetModel | None = None, kind: str | None = None,
                shape: DeepONetShape | None = None) -> AgentNets:
    """Initialize actor, twin critics and their targets.

    For DeepONet extractors one model (pretrained, or freshly initialized
    when ``config.extractor == 'deeponet_random'``) is copied into every
    network so all start from identical extractor parameters.
    """
    if config.extractor == "flatten":
        base = FlattenExtractor(n_points)
    else:
        if config.extractor == "deeponet_pretrained":
            if pretrained is None:
                raise ConfigError("the pretrained variant needs a DeepONet checkpoint")
            model = pretrained.copy()
        else:
            if kind is None:
                raise ConfigError("a random DeepONet extractor needs the benchmark kind")
            model = DeepONetModel.initialized(kind, rng, shape or DeepONetShape(n_points))
        if model.n_points != n_points:
            raise ConfigError(f"DeepONet reads {model.n_points} points, environment has {n_points}")
        base = DeepONetExtractor(model, coeff)
    feat = base.out_dim
    actor_fc = DenseNet.initialized([feat, *config.actor_hidden, 2],
                                    ["relu"] * len(config.actor_hidden) + ["identity"], rng)
    actor = Actor(base.copy(), actor_fc, bound)
    critics = []
    for _ in range(2):
        fc = DenseNet.initialized([feat + 1, *config.critic_hidden, 1],
                                  ["relu"] * len(config.critic_hidden) + ["identity"], rng)
        critics.append(Critic(base.copy(), fc, bound))
    return AgentNets(actor, critics[0], critics[1], critics[0].copy(), critics[1].copy())


# ---------------------------------------------------------------------------
# updates


def compute_target(batch: Batch, nets: AgentNets, config: SacConfig, noise) -> np.ndarray:
    """``y = r + gamma (1 - done) (min_i Qbar_i(s', a') - alpha log pi(a'|s'))``."""
    sample, _ = nets.actor.sample(batch.next_state, noise)
    q1, _ = nets.target1.forward(batch.next_state, sample.action)
    q2, _ = nets.target2.forward(batch.next_state, sample.action)
    soft = np.minimum(q1, q2) - config.alpha * sample.log_prob
    return batch.reward + config.gamma_rl * (1.0 - batch.done) * soft


def target_value(reward, done, q1, q2, log_prob, gamma_rl, alpha):
    """Same arithmetic as :func:`compute_target` once the network outputs are known."""
    return reward + gamma_rl * (1.0 - done) * (np.minimum(q1, q2) - alpha * log_prob)


def critic_loss_grads(critic: Critic, batch: Batch, y):
    q, cache = critic.forward(batch.state, batch.action)
    err = q - y
    loss = float(np.mean(err * err))
    grads, _ = critic.backward(cache, (2.0 / err.shape[0]) * err)
    return loss, grads


def actor_loss_grads(nets: AgentNets, batch: Batch, config: SacConfig, noise):
    """``mean(alpha log pi(a~|s) - min_i Q_i(s, a~))`` and its gradient in the actor."""
    actor = nets.actor
    sample, a_cache = actor.sample(batch.state, noise)
    q1, c1 = nets.critic1.forward(batch.state, sample.action)
    q2, c2 = nets.critic2.forward(batch.state, sample.action)
    m = q1.shape[0]
    use1 = q1 <= q2
    qmin = np.where(use1, q1, q2)
    loss = float(np.mean(config.alpha * sample.log_prob - qmin))
    # critics are frozen: only dQ/da is needed
    _, dq1_da = nets.critic1.backward(c1, np.where(use1, 1.0, 0.0), need_params=False)
    _, dq2_da = nets.critic2.backward(c2, np.where(use1, 0.0, 1.0), need_params=False)
    grad_action = -(dq1_da + dq2_da) / m
    grad_log_prob = np.full(m, config.alpha / m)
    g_mean, g_log_std = sample.backward(grad_action, grad_log_prob)
    return loss, actor.backward(a_cache, g_mean, g_log_std)


def polyak_update(targets, critics, tau: float) -> None:
    """``target <- tau * critic + (1 - tau) * target`` for every parameter."""
    for target, critic in zip(targets, critics):
        for pt, pc in zip(target.params, critic.params):
            pt *= 1.0 - tau
            pt += tau * pc


def _check_loss(loss: float, what: str, step: int) -> None:
    if not math.isfinite(loss):
        raise NumericalFailureError(f"non-finite {what} loss at step {step}")


class SacLearner:
    """Optimizers plus the ordered update of one gradient step."""

    def __init__(self, nets: AgentNets, config: SacConfig, rng: Rng):
        self.nets = nets
        self.config = config
        self.rng = rng
        self.critic_opts = [make_optimizer(config.optimizer, c.params, config.critic_lr)
                            for c in nets.critics]
        self.actor_opt = make_optimizer(config.optimizer, nets.actor.params, config.actor_lr)

    def critic_update(self, batch: Batch, y) -> tuple:
        losses = []
        for critic, opt in zip(self.nets.critics, self.critic_opts):
            loss, grads = critic_loss_grads(critic, batch, y)
            losses.append(loss)
            opt.step(grads)
        return tuple(losses)

    def actor_update(self, batch: Batch, noise) -> float:
        loss, grads = actor_loss_grads(self.nets, batch, self.config, noise)
        self.actor_opt.step(grads)
        return loss

    def gradient_step(self, batch: Batch, step: int = 0) -> tuple:
        cfg = self.config
        m = len(batch)
        y = compute_target(batch, self.nets, cfg, self.rng.normal(m))
        l1, l2 = self.critic_update(batch, y)
        _check_loss(l1, "critic1", step)
        _check_loss(l2, "critic2", step)
        polyak_update(self.nets.targets, self.nets.critics, cfg.tau)
        la = self.actor_update(batch, self.rng.normal(m))
        _check_loss(la, "actor", step)
        return l1, l2, la


# ---------------------------------------------------------------------------
# training


METRIC_COLUMNS = ("step", "episode", "episodic_return", "critic1_loss", "critic2_loss",
                  "actor_loss", "buffer_size")


@dataclass
class TrainResult:
    nets: AgentNets
    rows: list = field(default_factory=list)
    episode_returns: list = field(default_factory=list)
    episode_end_steps: list = field(default_factory=list)


def sac_train(env: PdeEnv, config: SacConfig, pretrained: DeepONetModel | None = None,
              progress=None) -> TrainResult:
    """Run the SAC loop for ``config.total_steps`` environment steps.

    The environment resets whenever an episode ends (horizon reached or
    state norm above the blow-up limit). Gradient steps start once the
    buffer holds ``warmup`` transitions and a full batch.
    """
    seed = config.seed
    env.rng = Rng(derive_seed(seed, _ENV_STREAM))
    buffer_rng = Rng(derive_seed(seed, _BUFFER_STREAM))
    policy_rng = Rng(derive_seed(seed, _POLICY_STREAM))
    init_rng = Rng(derive_seed(seed, _INIT_STREAM))
    cfg_env = env.config
    nets = build_agent(config, cfg_env.n_points, cfg_env.action_bound, env.coefficient.samples,
                       init_rng, pretrained, cfg_env.kind)
    learner = SacLearner(nets, config, policy_rng)
    buffer = ReplayBuffer(config.capacity, cfg_env.n_points,
                          min_size=max(config.warmup, config.batch_size))
    result = TrainResult(nets)
    state = env.reset()
    episode, ep_return = 0, 0.0
    for step in range(config.total_steps):
        if env.done:
            state = env.reset()
        action = nets.actor.act(state, policy_rng)
        next_state, reward, done, truncated = env.step(action)
        stored_done = done and not (truncated and config.truncation_bootstraps)
        buffer.push(Transition(state, action, reward, next_state, stored_done))
        ep_return += reward
        state = next_state
        losses = (None, None, None)
        if len(buffer) >= buffer.min_size:
            for _ in range(config.grad_steps):
                losses = learner.gradient_step(buffer.sample(config.batch_size, buffer_rng), step)
        row = {"step": step, "episode": episode, "episodic_return": None,
               "critic1_loss": losses[0], "critic2_loss": losses[1], "actor_loss": losses[2],
               "buffer_size": len(buffer)}
        if done:
            row["episodic_return"] = ep_return
            result.episode_returns.append(ep_return)
            result.episode_end_steps.append(step)
            if progress is not None:
                progress(episode, step, ep_return)
            episode += 1
            ep_return = 0.0
        result.rows.append(row)
    return result


def _fmt(value) -> str:
    if value is None:
        return ""
    if isinstance(value, float):
        return repr(value)
    return str(value)


def config_header(sections: dict) -> list:
    """``# key=value`` lines, one per configuration entry."""
    lines = []
    for section, values in sections.items():
        for key, value in values.items():
            lines.append(f"# {section}.{key}={value}")
    return lines


def metrics_csv(result: TrainResult, header: dict) -> str:
    out = io.StringIO()
    for line in config_header(header):
        out.write(line + "\n")
    writer = csv.writer(out, lineterminator="\n")
    writer.writerow(METRIC_COLUMNS)
    for row in result.rows:
        writer.writerow([_fmt(row[c]) for c in METRIC_COLUMNS])
    return out.getvalue()


def sac_config_dict(config: SacConfig) -> dict:
    return {f.name: getattr(config, f.name) for f in fields(config)}


def reward_curve_area(end_steps, returns) -> float:
    """Time-averaged episodic return: trapezoid area over environment steps / span."""
    x = np.asarray(end_steps, dtype=float)
    y = np.asarray(returns, dtype=float)
    if x.size == 0:
        return math.nan
    if x.size == 1 or x[-1] == x[0]:
        return float(y.mean())
    return float(np.sum(0.5 * (y[1:] + y[:-1]) * np.diff(x)) / (x[-1] - x[0]))


# ---------------------------------------------------------------------------
# evaluation


@dataclass
class EvalReport:
    times: np.ndarray
    norms: np.ndarray
    controls: np.ndarray
    overshoot: float
    convergence_time: float
    steady_state_error: float
    total_effort: float

    def summary(self) -> dict:
        return {"overshoot": self.overshoot, "convergence_time": self.convergence_time,
                "steady_state_error": self.steady_state_error,
                "total_effort": self.total_effort}


def summarize(times, norms, controls) -> EvalReport:
    times = np.asarray(times, dtype=float)
    norms = np.asarray(norms, dtype=float)
    controls = np.asarray(controls, dtype=float)
    initial = norms[0]
    overshoot = float(norms.max() / initial) if initial > 0 else math.nan
    below = np.nonzero(norms <= 0.1 * initial)[0]
    convergence = float(times[below[0]]) if below.size else math.inf
    tail = max(1, int(math.ceil(0.1 * (norms.size - 1))))
    steady = float(norms[-tail:].mean())
    effort = float(np.abs(controls).sum())
    return EvalReport(times, norms, controls, overshoot, convergence, steady, effort)


def evaluate_controller(env: PdeEnv, controller, u0: float) -> EvalReport:
    """Roll out ``controller(state) -> action`` through the environment.

    Norms are recorded at every interaction step (t = 0 included); the
    episode runs to the horizon unless the state blows up.
    """
    state = env.reset(u0)
    times, norms, controls = [0.0], [float(l2_norm(state, env.dx))], []
    done = False
    while not done:
        action = float(controller(state))
        action = min(max(action, -env.config.action_bound), env.config.action_bound)
        state, _, done, _ = env.step(action)
        controls.append(action)
        times.append(env.state.time)
        norms.append(float(l2_norm(state, env.dx)))
    return summarize(times, norms, controls)


def evaluate_policy(nets: AgentNets, env: PdeEnv, u0: float = 9.0,
                    deterministic: bool = True, rng: Rng | None = None) -> EvalReport:
    """Evaluate the actor on ``env``; extractors read the environment's coefficient."""
    nets.set_coefficient(env.coefficient.samples)
    if deterministic:
        return evaluate_controller(env, lambda s: nets.actor.act(s, deterministic=True), u0)
    rng = rng or Rng(0)
    return evaluate_controller(env, lambda s: nets.actor.act(s, rng), u0)
