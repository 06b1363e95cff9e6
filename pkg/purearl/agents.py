"""
Goal-conditioned offline agents
-------------------------------

Six variants share one set of building blocks:

- ``iql``: flat V(s, g), Q(s, g, a) and a policy pi(a | s, g).
- ``hiql1vr``: one action-free value V(s, o(s, g)) trained jointly with the
  option embedder, policies extracted from value differences.
- ``hiql2v``: low-level V_l, Q_l on (s, g_s), high-level V_h, Q_h, and a high
  policy emitting raw subgoal states.
- ``hiql2vr``: as hiql2v, with the embedder trained through V_l.
- ``arli``: as hiql2v, with the embedder trained through the low policy.
- ``arle``: as arli, with the low value, low critic and embedder reading the
  displacement g_s - s and soft-normalised options.

Each update function takes an agent and a ``SampledBatch``, makes one optimiser
step on the parameters it owns and returns its named losses. ``train`` runs
them in a fixed order and is deterministic given the seed.
"""

import json
import logging
import math
from dataclasses import asdict, dataclass, fields
from typing import (
    Any,
    Callable,
    Dict,
    Iterable,
    List,
    Mapping,
    Optional,
    Sequence,
    TextIO,
    Tuple,
    Union,
)

import numpy as np
from typing_extensions import Self

from .config import RunConfig, read_config_lines
from .container import FileLike, read_container, write_container
from .data import (
    Dataset,
    SampledBatch,
    high_value_config,
    low_value_config,
    policy_config,
    sample_batch,
    value_config,
)
from .errors import ConfigError, NumericAbort, TrainingAborted, UsageError
from .tensor import (
    Adam,
    CategoricalPolicyHead,
    GaussianPolicyHead,
    NetBundle,
    NormalizeStats,
    Parameter,
    PolicyHead,
    Tensor,
    backward,
    concat,
    expectile_loss,
    length_normalize,
    mlp_forward,
    polyak_update,
    reduce_mean,
    reshape,
    soft_normalize,
    square,
    stopgrad,
)

logger = logging.getLogger(__name__)

VARIANTS = ("iql", "hiql1vr", "hiql2v", "hiql2vr", "arli", "arle")
HIERARCHICAL = VARIANTS[1:]
LOSSES = ("awr", "ddpgbc")
OPTION_NORMS = ("length", "none")

# per-profile hyperparameters for desk-scale and larger mazes
PROFILES: Dict[str, Dict[str, Any]] = {
    "navigate": dict(
        n=25, gamma=0.995, flat_loss="ddpgbc", alpha=0.1,
        low_loss="awr", alpha_l=3.0, high_loss="awr", alpha_h=3.0,
    ),
    "manipulation": dict(
        n=25, gamma=0.99, flat_loss="ddpgbc", alpha=1.0,
        low_loss="awr", alpha_l=3.0, high_loss="ddpgbc", alpha_h=0.1,
    ),
    "teleport": dict(
        n=25, gamma=0.99, flat_loss="ddpgbc", alpha=0.1,
        low_loss="awr", alpha_l=3.0, high_loss="awr", alpha_h=3.0,
    ),
    "desk": dict(
        n=5, gamma=0.99, flat_loss="ddpgbc", alpha=0.1,
        low_loss="awr", alpha_l=3.0, high_loss="awr", alpha_h=3.0,
    ),
}

FLAT_TAU = 0.9
HIERARCHICAL_TAU = 0.7


@dataclass(frozen=True)
class AgentSpec:
    variant: str
    state_dim: int
    action_dim: int
    discrete: bool = False
    n: int = 5
    gamma: float = 0.99
    tau: float = HIERARCHICAL_TAU
    alpha: float = 0.1
    alpha_l: float = 3.0
    alpha_h: float = 3.0
    flat_loss: str = "ddpgbc"
    low_loss: str = "awr"
    high_loss: str = "awr"
    d: int = 10
    target_rate: float = 0.005
    exp_adv_max: float = 100.0
    lr: float = 3e-4
    batch_size: int = 1024
    value_hidden: Tuple[int, ...] = (64, 64)
    actor_hidden: Tuple[int, ...] = (64, 64)
    rep_hidden: Tuple[int, ...] = (64, 64)
    layer_norm: bool = True
    log_std_min: float = -5.0
    log_std_max: float = 2.0
    option_norm: str = "length"

    def __post_init__(self) -> None:
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown variant {self.variant}, expected one of {VARIANTS}")
        if not 0.0 < self.gamma < 1.0:
            raise ConfigError(f"gamma must be in (0, 1), got {self.gamma}")
        if not 0.0 < self.tau < 1.0:
            raise ConfigError(f"tau must be in (0, 1), got {self.tau}")
        if self.variant in HIERARCHICAL and self.n < 2:
            raise ConfigError(f"hierarchical variants need n >= 2, got {self.n}")
        if self.n < 1 or self.d < 1 or self.state_dim < 1 or self.action_dim < 1:
            raise ConfigError(f"invalid dimensions in {self}")
        for loss in (self.flat_loss, self.low_loss, self.high_loss):
            if loss not in LOSSES:
                raise ConfigError(f"unknown policy loss {loss}, expected one of {LOSSES}")
        if self.variant == "hiql1vr" and self.low_loss == "ddpgbc":
            raise ConfigError("hiql1vr has no low-level critic, its low policy needs awr")
        if self.option_norm not in OPTION_NORMS:
            raise ConfigError(f"unknown option_norm {self.option_norm}")
        if not 0.0 < self.target_rate <= 1.0:
            raise ConfigError(f"target_rate must be in (0, 1], got {self.target_rate}")
        if self.exp_adv_max <= 0.0 or self.lr <= 0.0 or self.batch_size < 1:
            raise ConfigError(f"invalid optimisation settings in {self}")
        if not self.log_std_min < self.log_std_max:
            raise ConfigError(f"invalid log_std range ({self.log_std_min}, {self.log_std_max})")

    @property
    def gamma_l(self) -> float:
        return 1.0 - 1.0 / self.n

    @property
    def gamma_h(self) -> float:
        return self.gamma**self.n

    @property
    def hierarchical(self) -> bool:
        return self.variant in HIERARCHICAL

    @classmethod
    def for_variant(
        cls, variant: str, state_dim: int, action_dim: int, profile: str = "desk", **overrides: Any
    ) -> Self:
        if profile not in PROFILES:
            raise ConfigError(f"unknown profile {profile}, expected one of {sorted(PROFILES)}")
        values: Dict[str, Any] = dict(PROFILES[profile])
        values["tau"] = FLAT_TAU if variant == "iql" else HIERARCHICAL_TAU
        values.update(overrides)
        return cls(variant=variant, state_dim=state_dim, action_dim=action_dim, **values)

    @classmethod
    def from_config(
        cls,
        config: RunConfig,
        state_dim: int,
        action_dim: int,
        discrete: bool,
        variant: Optional[str] = None,
    ) -> Self:
        section = config.section("agent")
        variant = variant or section.pop("variant")
        section.pop("variant", None)
        profile = section.pop("profile")
        overrides = {k: v for k, v in section.items() if v is not None}
        for key in ("value_hidden", "actor_hidden", "rep_hidden"):
            if key in overrides:
                overrides[key] = tuple(overrides[key])
        return cls.for_variant(variant, state_dim, action_dim, profile, discrete=discrete, **overrides)

    def to_text(self) -> str:
        lines = []
        for key, value in sorted(asdict(self).items()):
            if isinstance(value, bool):
                raw = "true" if value else "false"
            elif isinstance(value, (tuple, list)):
                raw = ",".join(str(v) for v in value)
            elif isinstance(value, float):
                raw = repr(value)
            else:
                raw = str(value)
            lines.append(f"agent.{key} = {raw}\n")
        return "".join(lines)

    @classmethod
    def from_text(cls, text: str) -> Self:
        defaults = {f.name: f for f in fields(cls)}
        values: Dict[str, Any] = {}
        for _, key, raw in read_config_lines(text.splitlines()):
            name = key[len("agent."):] if key.startswith("agent.") else key
            if name not in defaults:
                raise ConfigError(f"unknown agent field {key}")
            kind = defaults[name].type
            if kind in (bool, "bool"):
                values[name] = raw == "true"
            elif kind in (int, "int"):
                values[name] = int(raw)
            elif kind in (float, "float"):
                values[name] = float(raw)
            elif name.endswith("_hidden"):
                values[name] = tuple(int(v) for v in raw.split(",") if v)
            else:
                values[name] = raw
        return cls(**values)


def net_layout(spec: AgentSpec) -> Dict[str, Tuple[int, str]]:
    """net name -> (input width, kind) for every net the variant owns"""
    ds, da, d = spec.state_dim, spec.action_dim, spec.d
    v = spec.variant
    if v == "iql":
        return {"V": (2 * ds, "value"), "Q": (2 * ds + da, "value"), "pi": (2 * ds, "actor")}
    if v == "hiql1vr":
        layout = {
            "V": (ds + d, "value"),
            "phi": (2 * ds, "rep"),
            "pi_l": (ds + d, "actor"),
            "pi_h": (2 * ds, "option"),
        }
        if spec.high_loss == "ddpgbc":
            layout["Q_h"] = (2 * ds + d, "value")
        return layout
    layout = {"V_h": (2 * ds, "value"), "pi_h": (2 * ds, "option")}
    if v == "hiql2v":
        layout.update(
            V_l=(2 * ds, "value"),
            Q_l=(2 * ds + da, "value"),
            Q_h=(3 * ds, "value"),
            pi_l=(2 * ds, "actor"),
        )
        return layout
    layout.update(Q_h=(2 * ds + d, "value"), pi_l=(ds + d, "actor"), Q_l=(2 * ds + da, "value"))
    if v == "hiql2vr":
        layout.update(V_l=(ds + d, "value"), phi=(2 * ds, "rep"))
    elif v == "arli":
        layout.update(V_l=(2 * ds, "value"), phi=(2 * ds, "rep"))
    else:
        layout.update(V_l=(ds, "value"), phi=(ds, "rep"))
    return layout


class OptionEmbedder:
    """
    maps (s, g_s) to a d-dimensional option

    pair mode reads the concatenation, displacement mode reads g_s - s only.
    norm is the training-time normalisation; deployment always normalises,
    with soft for soft and length otherwise
    """

    net: NetBundle
    mode: str
    norm: str
    d: int
    stats: NormalizeStats

    def __init__(self, net: NetBundle, mode: str, norm: str, stats: Optional[NormalizeStats] = None):
        assert mode in ("pair", "displacement"), mode
        assert norm in ("length", "soft", "none"), norm
        self.net = net
        self.mode = mode
        self.norm = norm
        self.d = net.output_dim
        self.stats = stats if stats is not None else NormalizeStats()

    def __repr__(self) -> str:
        return f"{self.__class__.__name__}({self.mode}, {self.norm}, d={self.d})"

    def features(self, s: np.ndarray, g_s: np.ndarray) -> np.ndarray:
        if self.mode == "displacement":
            return g_s - s
        return np.concatenate([s, g_s], axis=-1)

    def raw(self, s: np.ndarray, g_s: np.ndarray, use_target: bool = False, frozen: bool = False) -> Tensor:
        return mlp_forward(self.net, self.features(s, g_s), use_target=use_target, frozen=frozen)

    def normalize(self, v: Tensor) -> Tensor:
        if self.norm == "soft":
            return soft_normalize(v, self.d)
        if self.norm == "length":
            return length_normalize(v, self.d, self.stats)
        return v

    def deploy_normalize(self, v: Tensor) -> Tensor:
        if self.norm == "soft":
            return soft_normalize(v, self.d)
        return length_normalize(v, self.d, self.stats)

    def embed(self, s: np.ndarray, g_s: np.ndarray, use_target: bool = False, frozen: bool = False) -> Tensor:
        return self.normalize(self.raw(s, g_s, use_target, frozen))


def _cat(*parts: Union[np.ndarray, Tensor]) -> Tensor:
    return concat(list(parts), axis=-1)


def awr_weights(advantages: np.ndarray, alpha: float, exp_adv_max: float) -> np.ndarray:
    """exp(alpha * A) clipped to exp_adv_max, strictly positive"""
    exponent = np.clip(alpha * np.asarray(advantages), -700.0, math.log(exp_adv_max))
    return np.exp(exponent)


def awr_loss(head: PolicyHead, features: Union[np.ndarray, Tensor], actions: np.ndarray, weights: np.ndarray) -> Tensor:
    """negative advantage-weighted log-likelihood, weights treated as constants"""
    return -reduce_mean(head.log_prob(features, actions) * stopgrad(weights))


def ddpgbc_loss(
    head: PolicyHead,
    features: Union[np.ndarray, Tensor],
    actions: np.ndarray,
    critic: Callable[[Tensor], Tensor],
    alpha: float,
) -> Tensor:
    """
    -(Q(mu) / mean|Q| + alpha * log pi(a)); the critic must evaluate its own
    parameters frozen so only the policy moves
    """
    q = critic(head.mean(features))
    scale = max(float(np.mean(np.abs(q.value))), 1e-6)
    return -(reduce_mean(q) * (1.0 / scale)) - alpha * reduce_mean(head.log_prob(features, actions))


class Agent:
    spec: AgentSpec
    nets: Dict[str, NetBundle]
    heads: Dict[str, PolicyHead]
    embedder: Optional[OptionEmbedder]
    optimisers: Dict[str, Adam]
    stats: NormalizeStats

    def __init__(self, spec: AgentSpec, seed: int = 0):
        self.spec = spec
        self.stats = NormalizeStats()
        self.nets = {}
        self.heads = {}
        rng = np.random.default_rng(np.random.SeedSequence([seed, 0]))
        for name, (width, kind) in sorted(net_layout(spec).items()):
            if kind == "value":
                self.nets[name] = NetBundle(name, [width, *spec.value_hidden, 1], spec.layer_norm, rng=rng)
            elif kind == "rep":
                self.nets[name] = NetBundle(name, [width, *spec.rep_hidden, spec.d], spec.layer_norm, rng=rng)
            elif kind == "option":
                out = spec.state_dim if spec.variant == "hiql2v" else spec.d
                self.heads[name] = GaussianPolicyHead(
                    name, [width, *spec.actor_hidden, out], spec.layer_norm, rng,
                    (spec.log_std_min, spec.log_std_max),
                )
            elif spec.discrete:
                self.heads[name] = CategoricalPolicyHead(
                    name, [width, *spec.actor_hidden, spec.action_dim], spec.layer_norm, rng
                )
            else:
                self.heads[name] = GaussianPolicyHead(
                    name, [width, *spec.actor_hidden, spec.action_dim], spec.layer_norm, rng,
                    (spec.log_std_min, spec.log_std_max),
                )

        self.embedder = None
        if "phi" in self.nets:
            if spec.variant == "arle":
                self.embedder = OptionEmbedder(self.nets["phi"], "displacement", "soft", self.stats)
            elif spec.variant == "hiql1vr":
                self.embedder = OptionEmbedder(self.nets["phi"], "pair", "length", self.stats)
            else:
                self.embedder = OptionEmbedder(self.nets["phi"], "pair", spec.option_norm, self.stats)
        self.optimisers = {
            group: Adam(params, lr=spec.lr) for group, params in self.parameter_groups().items()
        }

    def __repr__(self) -> str:
        return f"{self.__class__.__name__}({self.spec.variant}, {sorted(self.net_names())})"

    def net_names(self) -> List[str]:
        return sorted(list(self.nets) + list(self.heads))

    def parameter_groups(self) -> Dict[str, List[Parameter]]:
        """optimiser groups; the embedder joins the group of the loss that trains it"""
        groups: Dict[str, List[Parameter]] = {}
        phi = list(self.nets["phi"].online) if "phi" in self.nets else []
        variant = self.spec.variant
        for name, net in self.nets.items():
            if name == "phi":
                continue
            params = list(net.online)
            if (variant == "hiql1vr" and name == "V") or (variant == "hiql2vr" and name == "V_l"):
                params += phi
            groups[name] = params
        for name, head in self.heads.items():
            params = head.parameters()
            if variant in ("arli", "arle") and name == "pi_l":
                params = params + phi
            groups[name] = params
        return groups

    def all_parameters(self) -> List[Parameter]:
        params: List[Parameter] = []
        for net in self.nets.values():
            params += net.online + net.target
        for head in self.heads.values():
            params += head.parameters() + head.net.target
        return params

    def snapshot(self) -> List[Tuple[Parameter, np.ndarray]]:
        # updates always rebind .value, so references are enough
        return [(p, p.value) for p in self.all_parameters()]

    @staticmethod
    def restore(snapshot: Sequence[Tuple[Parameter, np.ndarray]]) -> None:
        for param, value in snapshot:
            param.value = value

    def value(self, name: str, inputs: Union[np.ndarray, Tensor], use_target: bool = False, frozen: bool = False) -> Tensor:
        out = mlp_forward(self.nets[name], inputs, use_target=use_target, frozen=frozen)
        return reshape(out, out.shape[:-1])

    def deploy_option(
        self,
        s: np.ndarray,
        g: np.ndarray,
        deterministic: bool = True,
        rng: Optional[np.random.Generator] = None,
    ) -> np.ndarray:
        """the option the low policy is conditioned on at deployment"""
        if not self.spec.hierarchical:
            raise UsageError("flat agents have no options")
        omega = self.heads["pi_h"].sample(np.concatenate([s, g], axis=-1), rng, deterministic)
        if self.embedder is None:
            return omega
        return self.embedder.deploy_normalize(Tensor(omega)).value

    def act(
        self,
        s: np.ndarray,
        g: np.ndarray,
        deterministic: bool = True,
        rng: Optional[np.random.Generator] = None,
    ) -> np.ndarray:
        s = np.asarray(s, dtype=np.float64)
        g = np.asarray(g, dtype=np.float64)
        if not self.spec.hierarchical:
            return self.heads["pi"].sample(np.concatenate([s, g], axis=-1), rng, deterministic)
        omega = self.deploy_option(s, g, deterministic, rng)
        return self.heads["pi_l"].sample(np.concatenate([s, omega], axis=-1), rng, deterministic)

    def to_records(self) -> Dict[str, np.ndarray]:
        records: Dict[str, np.ndarray] = {}
        for net in self.nets.values():
            records.update(net.to_records())
        for name, head in self.heads.items():
            records.update(head.net.to_records())
            if isinstance(head, GaussianPolicyHead):
                records[f"{name}.log_std"] = head.log_std.value
        return records

    def write_to(self, outfile: FileLike) -> None:
        write_container(outfile, self.spec.to_text(), self.to_records())

    @classmethod
    def from_stream(cls, infile: FileLike) -> Self:
        header, records = read_container(infile)
        agent = cls(AgentSpec.from_text(header))
        for name, net in list(agent.nets.items()) + [(n, h.net) for n, h in agent.heads.items()]:
            loaded = NetBundle.from_records(name, records)
            if loaded.layer_sizes != net.layer_sizes:
                raise RuntimeError(f"invalid checkpoint, {name} has layers {loaded.layer_sizes}")
            net.copy_from(loaded)
        for name, head in agent.heads.items():
            if isinstance(head, GaussianPolicyHead):
                key = f"{name}.log_std"
                if key not in records or records[key].shape != head.log_std.value.shape:
                    raise RuntimeError(f"invalid checkpoint, bad or missing {key}")
                head.log_std.value = np.array(records[key], dtype=np.float64)
        return agent

    @classmethod
    def from_file(cls, path: str) -> Self:
        with open(path, "rb") as infile:
            return cls.from_stream(infile)


def _require(agent: Agent, *names: str) -> None:
    missing = [n for n in names if n not in agent.nets and n not in agent.heads]
    if missing:
        raise UsageError(f"{agent.spec.variant} agent has no {', '.join(missing)}")


def _apply(agent: Agent, group: str, loss: Tensor, update: str) -> float:
    value = loss.item()
    if not math.isfinite(value):
        logger.error(f"non-finite loss in {update}: {value}")
        raise NumericAbort(f"non-finite loss in {update}", update=update)
    try:
        agent.optimisers[group].step(backward(loss))
    except NumericAbort as e:
        e.update = update
        raise
    if group in agent.heads:
        agent.heads[group].project()
    return value


def _polyak(agent: Agent, *names: str) -> None:
    for name in names:
        polyak_update(agent.nets[name], agent.spec.target_rate)


def _option_target(agent: Agent, s: np.ndarray, g_s: np.ndarray) -> np.ndarray:
    """the stopgradded option a high policy is trained to emit for waypoint g_s"""
    if agent.embedder is None:
        return g_s
    return agent.embedder.embed(s, g_s, frozen=True).value


def update_flat_value_iql(agent: Agent, batch: SampledBatch) -> Dict[str, float]:
    _require(agent, "V", "Q")
    spec = agent.spec
    s, a, s2, g = batch.observations, batch.actions, batch.next_observations, batch.goals
    q_target = agent.value("Q", _cat(s, g, a), use_target=True).value
    v_next = agent.value("V", _cat(s2, g)).value
    td_target = batch.rewards + spec.gamma * v_next

    v = agent.value("V", _cat(s, g))
    value_loss = _apply(agent, "V", reduce_mean(expectile_loss(q_target - v, spec.tau)), "value")
    q = agent.value("Q", _cat(s, g, a))
    critic_loss = _apply(agent, "Q", reduce_mean(square(q - td_target)), "critic")
    _polyak(agent, "V", "Q")
    return {"value_loss": value_loss, "critic_loss": critic_loss}


def _low_value(agent: Agent, s: np.ndarray, w: np.ndarray, frozen: bool = False) -> Tensor:
    """
    V_l for the variant; arle reads only w - s, so a translation whose sums
    s + t and w + t are exact (cell-aligned or dyadic) gives bit-identical
    values, other shifts agree up to the rounding of those sums
    """
    variant = agent.spec.variant
    if variant == "arle":
        return agent.value("V_l", w - s, frozen=frozen)
    if variant == "hiql2vr":
        assert agent.embedder is not None
        option = agent.embedder.embed(s, w, frozen=frozen)
        return agent.value("V_l", _cat(s, option), frozen=frozen)
    return agent.value("V_l", _cat(s, w), frozen=frozen)


def _low_critic_input(agent: Agent, s: np.ndarray, w: np.ndarray, a: Union[np.ndarray, Tensor]) -> Tensor:
    if agent.spec.variant == "arle":
        return _cat(s, w - s, a)
    return _cat(s, w, a)


def update_low_value_iql(agent: Agent, batch: SampledBatch) -> Dict[str, float]:
    """
    IQL on the low level: the batch goals are the low-level targets, sampled
    with the low-value mixture at the low-level discount
    """
    if agent.spec.variant == "iql":
        return update_flat_value_iql(agent, batch)
    _require(agent, "V_l", "Q_l")
    spec = agent.spec
    s, a, s2, w = batch.observations, batch.actions, batch.next_observations, batch.goals

    q_target = agent.value("Q_l", _low_critic_input(agent, s, w, a), use_target=True).value
    v_next = _low_value(agent, s2, w).value
    td_target = batch.rewards + spec.gamma_l * v_next

    v = _low_value(agent, s, w)
    value_loss = _apply(agent, "V_l", reduce_mean(expectile_loss(q_target - v, spec.tau)), "low_value")
    q = agent.value("Q_l", _low_critic_input(agent, s, w, a))
    critic_loss = _apply(agent, "Q_l", reduce_mean(square(q - td_target)), "low_critic")
    _polyak(agent, "V_l", "Q_l")
    return {"low_value_loss": value_loss, "low_critic_loss": critic_loss}


def _hiql_value(agent: Agent, s: np.ndarray, g: np.ndarray, use_target: bool = False, frozen: bool = False) -> Tensor:
    """the single hiql1vr value V(s, o(s, g))"""
    assert agent.embedder is not None
    option = agent.embedder.embed(s, g, use_target=use_target, frozen=frozen)
    return agent.value("V", _cat(s, option), use_target=use_target, frozen=frozen)


def update_high_value_ivl(agent: Agent, batch: SampledBatch) -> Dict[str, float]:
    """action-free expectile TD on (s, g) with the target value network"""
    spec = agent.spec
    s, s2, g = batch.observations, batch.next_observations, batch.goals
    if spec.variant == "hiql1vr":
        target = batch.rewards + spec.gamma * _hiql_value(agent, s2, g, use_target=True).value
        v = _hiql_value(agent, s, g)
        loss = _apply(agent, "V", reduce_mean(expectile_loss(target - v, spec.tau)), "value")
        _polyak(agent, "V", "phi")
        return {"value_loss": loss}
    _require(agent, "V_h")
    target = batch.rewards + spec.gamma * agent.value("V_h", _cat(s2, g), use_target=True).value
    v = agent.value("V_h", _cat(s, g))
    loss = _apply(agent, "V_h", reduce_mean(expectile_loss(target - v, spec.tau)), "high_value")
    _polyak(agent, "V_h")
    return {"high_value_loss": loss}


def value_estimate(agent: Agent, s: np.ndarray, g: np.ndarray, level: str = "low") -> np.ndarray:
    """
    V_l(s, g) for level low, V_h(s, g) for level high; variants with a
    single value network return it for both
    """
    if level not in ("low", "high"):
        raise ConfigError(f"unknown value level {level}")
    s = np.asarray(s, dtype=np.float64)
    g = np.broadcast_to(np.asarray(g, dtype=np.float64), s.shape)
    if agent.spec.variant == "iql":
        return agent.value("V", np.concatenate([s, g], axis=-1)).value
    if agent.spec.variant == "hiql1vr":
        return _hiql_value(agent, s, g).value
    if level == "low":
        return _low_value(agent, s, g).value
    return agent.value("V_h", np.concatenate([s, g], axis=-1)).value


def _high_critic(agent: Agent, s: np.ndarray, g: np.ndarray, option: Union[np.ndarray, Tensor], frozen: bool = False) -> Tensor:
    return agent.value("Q_h", _cat(s, g, option), frozen=frozen)


def _high_state_value(agent: Agent, s: np.ndarray, g: np.ndarray) -> np.ndarray:
    if agent.spec.variant == "hiql1vr":
        return _hiql_value(agent, s, g).value
    return agent.value("V_h", np.concatenate([s, g], axis=-1)).value


def fit_high_q(agent: Agent, batch: SampledBatch) -> Dict[str, float]:
    """regress Q_h(s, g, option of g_s) onto V_h(g_s, g); the option is a constant"""
    _require(agent, "Q_h")
    s, g, w = batch.observations, batch.goals, batch.waypoints
    target = _high_state_value(agent, w, g)
    option = _option_target(agent, s, w)
    q = _high_critic(agent, s, g, option)
    loss = _apply(agent, "Q_h", reduce_mean(square(q - target)), "high_critic")
    _polyak(agent, "Q_h")
    return {"high_critic_loss": loss}


def _low_condition(agent: Agent, s: np.ndarray, w: np.ndarray) -> Union[np.ndarray, Tensor]:
    """what the low policy reads besides s; gradient reaches phi only for arli/arle"""
    if agent.embedder is None:
        return w
    if agent.spec.variant in ("arli", "arle"):
        return agent.embedder.embed(s, w)
    return agent.embedder.embed(s, w, frozen=True).value


def update_low_policy(agent: Agent, batch: SampledBatch) -> Dict[str, float]:
    spec = agent.spec
    if spec.variant == "iql":
        return update_flat_policy(agent, batch)
    _require(agent, "pi_l")
    s, a, s2, w = batch.observations, batch.actions, batch.next_observations, batch.waypoints
    head = agent.heads["pi_l"]
    features = _cat(s, _low_condition(agent, s, w))

    if spec.low_loss == "ddpgbc":
        def critic(mu: Tensor) -> Tensor:
            return agent.value("Q_l", _low_critic_input(agent, s, w, mu), frozen=True)

        loss = ddpgbc_loss(head, features, a, critic, spec.alpha_l)
    else:
        if spec.variant == "hiql1vr":
            advantage = _hiql_value(agent, s2, w).value - _hiql_value(agent, s, w).value
        else:
            q = agent.value("Q_l", _low_critic_input(agent, s, w, a)).value
            advantage = q - _low_value(agent, s, w).value
        weights = awr_weights(advantage, spec.alpha_l, spec.exp_adv_max)
        loss = awr_loss(head, features, a, weights)
    return {"low_actor_loss": _apply(agent, "pi_l", loss, "low_actor")}


def update_high_policy(agent: Agent, batch: SampledBatch) -> Dict[str, float]:
    """the embedder only supplies constant targets here and never moves"""
    spec = agent.spec
    _require(agent, "pi_h")
    s, g, w = batch.observations, batch.goals, batch.waypoints
    head = agent.heads["pi_h"]
    features = np.concatenate([s, g], axis=-1)
    target = _option_target(agent, s, w)

    if spec.high_loss == "ddpgbc":
        _require(agent, "Q_h")
        embedder = agent.embedder

        def critic(mu: Tensor) -> Tensor:
            option = embedder.deploy_normalize(mu) if embedder is not None else mu
            return _high_critic(agent, s, g, option, frozen=True)

        loss = ddpgbc_loss(head, features, target, critic, spec.alpha_h)
    else:
        if spec.variant == "hiql1vr":
            advantage = _hiql_value(agent, w, g).value - _hiql_value(agent, s, g).value
        else:
            advantage = _high_critic(agent, s, g, target).value - _high_state_value(agent, s, g)
        weights = awr_weights(advantage, spec.alpha_h, spec.exp_adv_max)
        loss = awr_loss(head, features, target, weights)
    return {"high_actor_loss": _apply(agent, "pi_h", loss, "high_actor")}


def update_flat_policy(agent: Agent, batch: SampledBatch) -> Dict[str, float]:
    _require(agent, "pi", "Q", "V")
    spec = agent.spec
    s, a, g = batch.observations, batch.actions, batch.goals
    head = agent.heads["pi"]
    features = np.concatenate([s, g], axis=-1)
    if spec.flat_loss == "ddpgbc":
        def critic(mu: Tensor) -> Tensor:
            return agent.value("Q", _cat(s, g, mu), frozen=True)

        loss = ddpgbc_loss(head, features, a, critic, spec.alpha)
    else:
        advantage = agent.value("Q", _cat(s, g, a)).value - agent.value("V", features).value
        loss = awr_loss(head, features, a, awr_weights(advantage, spec.alpha, spec.exp_adv_max))
    return {"actor_loss": _apply(agent, "pi", loss, "actor")}


def train_step(agent: Agent, dataset: Dataset, rng: np.random.Generator) -> Dict[str, float]:
    """
    one step in the fixed order low value, high value, high critic, low
    policy, high policy; batches are drawn in that order from rng
    """
    spec = agent.spec
    size, n = spec.batch_size, spec.n
    losses: Dict[str, float] = {}
    if spec.variant == "iql":
        value_batch = sample_batch(dataset, size, value_config(spec.gamma), n, rng)
        policy_batch = sample_batch(dataset, size, policy_config(spec.gamma), n, rng)
        losses.update(update_flat_value_iql(agent, value_batch))
        losses.update(update_flat_policy(agent, policy_batch))
        return losses

    low_batch = sample_batch(dataset, size, low_value_config(spec.gamma_l), n, rng)
    high_batch = sample_batch(dataset, size, high_value_config(spec.gamma), n, rng)
    policy_batch = sample_batch(dataset, size, policy_config(spec.gamma), n, rng)
    if "V_l" in agent.nets:
        losses.update(update_low_value_iql(agent, low_batch))
    losses.update(update_high_value_ivl(agent, high_batch))
    if "Q_h" in agent.nets:
        losses.update(fit_high_q(agent, high_batch))
    losses.update(update_low_policy(agent, policy_batch))
    losses.update(update_high_policy(agent, policy_batch))
    return losses


def check_compatible(spec: AgentSpec, dataset: Dataset) -> None:
    if (spec.state_dim, spec.action_dim) != (dataset.state_dim, dataset.action_dim):
        raise ConfigError(
            f"agent dims ({spec.state_dim}, {spec.action_dim}) do not match dataset "
            f"({dataset.state_dim}, {dataset.action_dim})"
        )
    if spec.discrete != dataset.discrete:
        raise ConfigError(f"agent discrete={spec.discrete} but dataset discrete={dataset.discrete}")


def train(
    spec: AgentSpec,
    dataset: Dataset,
    steps: int,
    seed: int,
    log_interval: int = 1000,
) -> Tuple[Agent, List[Dict[str, float]]]:
    check_compatible(spec, dataset)
    agent = Agent(spec, seed)
    rng = np.random.default_rng(np.random.SeedSequence([seed, 1]))
    metrics: List[Dict[str, float]] = []
    for step in range(1, steps + 1):
        snapshot = agent.snapshot()
        try:
            losses = train_step(agent, dataset, rng)
        except NumericAbort as e:
            e.step = step
            agent.restore(snapshot)
            logger.error(f"numeric abort at step {step} in {e.update} ({e.parameter}): {e}")
            raise TrainingAborted(e, agent, metrics) from e
        if step % log_interval == 0 or step == steps:
            record: Dict[str, float] = {"step": step, **losses}
            metrics.append(record)
            summary = " ".join(f"{k}={v:.5g}" for k, v in sorted(losses.items()))
            logger.info(f"{spec.variant} seed {seed} step {step}: {summary}")
    if agent.stats.degenerate:
        logger.warning(f"{agent.stats.degenerate} degenerate option normalisations during training")
    return agent, metrics


def write_metrics(outfile: TextIO, metrics: Iterable[Mapping[str, float]]) -> None:
    for record in metrics:
        outfile.write(json.dumps(dict(record), sort_keys=True) + "\n")


def read_metrics(infile: TextIO) -> List[Dict[str, float]]:
    return [json.loads(line) for line in infile if line.strip()]
