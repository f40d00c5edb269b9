"""Exit-specific adapters with shared projections and multi-class-token forward.

Each exit owns one class-token row. Rows travel through the frozen encoder
together with the shared feature tokens and are retired (captured for their
head) right after the encoder layer the exit is attached to.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from . import tensor as T
from .tensor import Parameter, Tensor
from .vit import (BackboneWeights, ConfigError, LinearHead, ViTConfig, ffn, final_norm,
                  mha, patch_embed, zero_head)

MERGE_MODES = ("residual-once", "per-branch-residual")


class StateError(RuntimeError):
    pass


@dataclass(frozen=True)
class ExitPlan:
    """Exit ``e`` (1-based) sits after encoder layer ``placement[e-1]``."""

    placement: tuple[int, ...]
    num_layers: int

    def __post_init__(self):
        p = tuple(int(x) for x in self.placement)
        object.__setattr__(self, "placement", p)
        if not p:
            raise ConfigError("exit plan needs at least one exit")
        if p[0] < 1 or p[-1] != self.num_layers:
            raise ConfigError(f"exit plan {p} must start >= 1 and end at layer {self.num_layers}")
        if any(b <= a for a, b in zip(p, p[1:])):
            raise ConfigError(f"exit placement {p} must be strictly increasing")

    @classmethod
    def default(cls, num_layers: int, num_exits: int = 7) -> "ExitPlan":
        if num_exits > num_layers:
            raise ConfigError(f"{num_exits} exits do not fit in {num_layers} layers")
        return cls(tuple(num_layers - num_exits + e for e in range(1, num_exits + 1)), num_layers)

    @property
    def num_exits(self) -> int:
        return len(self.placement)

    def psi(self, e: int) -> int:
        return self.placement[e - 1]

    def live_at_layer(self, k: int) -> list[int]:
        return [e for e, layer in enumerate(self.placement, 1) if layer >= k]

    def is_last_layers(self) -> bool:
        return self.placement == tuple(range(self.num_layers - self.num_exits + 1,
                                             self.num_layers + 1))


def live_exits(m: int, plan: ExitPlan) -> list[int]:
    """Exits still carrying a class row at adapter ``m`` (1..2L)."""
    if not 1 <= m <= 2 * plan.num_layers:
        raise IndexError(f"adapter index {m} outside 1..{2 * plan.num_layers}")
    return plan.live_at_layer(math.ceil(m / 2))


@dataclass
class EAdapterBank:
    dim: int
    dprime: int
    U_down: Parameter
    U_up: Parameter
    R: list[Parameter]
    W: list[Parameter]
    lam: dict[tuple[int, int], Parameter]
    shared: bool = False

    @classmethod
    def init(cls, dim: int, dprime: int, plan: ExitPlan, rng: np.random.Generator,
             shared: bool = False) -> "EAdapterBank":
        if dprime >= dim:
            raise ConfigError(f"bottleneck d'={dprime} must be smaller than d={dim}")
        nadapt = 2 * plan.num_layers
        bd, br = 1.0 / math.sqrt(dim), 1.0 / math.sqrt(dprime)
        U_down = T.parameter("bank.U_down", rng.uniform(-bd, bd, (dim, dprime)), True)
        U_up = T.parameter("bank.U_up", np.zeros((dprime, dim)), True)
        R, W = [], []
        for m in range(1, nadapt + 1):
            R.append(T.parameter(f"bank.R.{m}", rng.uniform(-br, br, (dprime, dprime)), True))
            W.append(T.parameter(f"bank.W.{m}", rng.uniform(-br, br, (dprime, dprime)), True))
        lam = {}
        for m in range(1, nadapt + 1):
            if shared:
                lam[(m, 0)] = T.parameter(f"bank.lam.{m}", np.ones(dprime), True)
            else:
                for e in live_exits(m, plan):
                    lam[(m, e)] = T.parameter(f"bank.lam.{m}.{e}", np.ones(dprime), True)
        return cls(dim, dprime, U_down, U_up, R, W, lam, shared)

    def parameters(self) -> list[Parameter]:
        return [self.U_down, self.U_up, *self.R, *self.W, *self.lam.values()]

    def element_count(self) -> int:
        return sum(p.size for p in self.parameters())

    def diag(self, m: int, exits: list[int]) -> Tensor:
        """Stack the live diagonals of adapter ``m`` into an e x d' tensor."""
        try:
            return T.stack([self.lam[(m, e)].tensor for e in exits])
        except KeyError as err:
            raise StateError(f"adapter {m} has no diagonal for exit {err.args[0][1]}") from None


@dataclass
class TokenState:
    cls: Tensor                       # N x c x d live class rows
    tags: list[int] | None            # exit id per row; None before fan-out
    Z: Tensor                         # N x n x d feature tokens
    captured: dict[int, Tensor] = field(default_factory=dict)

    @property
    def live_count(self) -> int:
        return self.cls.shape[1]


def _up(h: Tensor, bank: EAdapterBank, m: int) -> Tensor:
    return T.matmul(T.matmul(h, bank.W[m - 1].tensor), bank.U_up.tensor)


def eadapter_apply(state: TokenState, m: int, bank: EAdapterBank, plan: ExitPlan,
                   merge_mode: str = "residual-once") -> TokenState:
    if merge_mode not in MERGE_MODES:
        raise ConfigError(f"unknown merge mode {merge_mode!r}")
    if bank.dprime >= bank.dim:
        raise ConfigError("bottleneck must be smaller than model width")
    live = live_exits(m, plan)
    if m == 1:
        if state.tags is not None or state.live_count != 1:
            raise StateError("first adapter expects the single pre-trained class token")
    elif state.tags != live:
        raise StateError(f"adapter {m}: live tags {state.tags} != schedule {live}")

    c = state.live_count
    rows = T.concat([state.cls, state.Z], axis=1)
    h = T.gelu(T.matmul(T.matmul(rows, bank.U_down.tensor), bank.R[m - 1].tensor))
    hc = T.getitem(h, (slice(None), slice(0, c)))
    hz = T.getitem(h, (slice(None), slice(c, None)))
    lam = bank.diag(m, live)
    # m == 1: the single class row broadcasts against all E diagonals (fan-out).
    cls_out = _up(hc * lam, bank, m) + state.cls
    z_out = _up(hz * T.tsum(lam, axis=0), bank, m)
    if merge_mode == "residual-once":
        z_out = z_out + state.Z
    else:
        z_out = z_out + state.Z * float(len(live))
    return TokenState(cls_out, list(live), z_out, state.captured)


def shared_adapter_apply(state: TokenState, m: int, bank: EAdapterBank) -> TokenState:
    """Vanilla adapter on a single shared class stream (one diagonal per adapter)."""
    rows = T.concat([state.cls, state.Z], axis=1)
    h = T.gelu(T.matmul(T.matmul(rows, bank.U_down.tensor), bank.R[m - 1].tensor))
    out = _up(h * bank.lam[(m, 0)].tensor, bank, m) + rows
    return TokenState(T.getitem(out, (slice(None), slice(0, 1))), state.tags,
                      T.getitem(out, (slice(None), slice(1, None))), state.captured)


def cross_exit_mask(c: int, t: int) -> np.ndarray:
    """Additive mask blocking class-row <-> class-row attention (self kept)."""
    mask = np.zeros((t, t))
    mask[:c, :c] = -1e30
    np.fill_diagonal(mask[:c, :c], 0.0)
    return mask


def _split(x: Tensor, c: int) -> tuple[Tensor, Tensor]:
    return (T.getitem(x, (slice(None), slice(0, c))),
            T.getitem(x, (slice(None), slice(c, None))))


def met_layer_forward(state: TokenState, k: int, backbone: BackboneWeights, bank: EAdapterBank,
                      plan: ExitPlan, cfg: ViTConfig, merge_mode: str = "residual-once",
                      mask_cross_exit: bool = False) -> TokenState:
    lw = backbone.layers[k - 1]
    state = eadapter_apply(state, 2 * k - 1, bank, plan, merge_mode)
    c = state.live_count
    expected = len(plan.live_at_layer(k))
    if c != expected:
        raise StateError(f"layer {k}: {c} live class tokens, token-count law wants {expected}")
    t = c + state.Z.shape[1]
    mask = cross_exit_mask(c, t) if mask_cross_exit and c > 1 else None
    x = mha(T.concat([state.cls, state.Z], axis=1), lw, cfg.heads, mask)
    cls, Z = _split(x, c)
    state = eadapter_apply(TokenState(cls, state.tags, Z, state.captured), 2 * k, bank, plan,
                           merge_mode)
    x = ffn(T.concat([state.cls, state.Z], axis=1), lw)
    cls, Z = _split(x, c)

    captured = dict(state.captured)
    keep, tags = [], []
    for i, e in enumerate(state.tags):
        if plan.psi(e) == k:
            captured[e] = T.getitem(cls, (slice(None), i))
        else:
            keep.append(i)
            tags.append(e)
    if len(keep) != c:
        cls = T.getitem(cls, (slice(None), np.array(keep, dtype=np.int64)))
    return TokenState(cls, tags, Z, captured)


@dataclass
class ForwardResult:
    reps: dict[int, Tensor]           # pre-LN captured class rows, N x d
    logits: dict[int, Tensor]         # N x num_classes
    live_counts: list[int]            # class rows entering MHA of each executed layer


@dataclass
class METModel:
    config: ViTConfig
    backbone: BackboneWeights
    bank: EAdapterBank
    heads: list[LinearHead]
    plan: ExitPlan
    merge_mode: str = "residual-once"
    share_token: bool = False
    mask_cross_exit: bool = False

    @classmethod
    def create(cls, config: ViTConfig, backbone: BackboneWeights, plan: ExitPlan, dprime: int,
               seed: int, merge_mode: str = "residual-once", share_token: bool = False,
               mask_cross_exit: bool = False) -> "METModel":
        if plan.num_layers != config.layers:
            raise ConfigError("exit plan and backbone disagree on depth")
        if merge_mode not in MERGE_MODES:
            raise ConfigError(f"unknown merge mode {merge_mode!r}")
        rng = np.random.default_rng(seed)
        bank = EAdapterBank.init(config.dim, dprime, plan, rng, shared=share_token)
        heads = [zero_head(f"head.{e}", config.dim, config.num_classes)
                 for e in range(1, plan.num_exits + 1)]
        return cls(config, backbone, bank, heads, plan, merge_mode, share_token, mask_cross_exit)

    def trainable(self) -> list[Parameter]:
        out = self.bank.parameters()
        for h in self.heads:
            out.extend(h.parameters())
        return out

    def parameters(self) -> list[Parameter]:
        return self.backbone.parameters() + self.trainable()

    def forward(self, images: np.ndarray, upto_exit: int | None = None,
                heads: str = "all") -> ForwardResult:
        if self.share_token:
            return shared_token_forward(images, self, upto_exit, heads)
        return met_forward(images, self, upto_exit, heads)


def _head_logits(model: METModel, reps: dict[int, Tensor], last: int,
                 heads: str) -> dict[int, Tensor]:
    if heads not in ("all", "last"):
        raise ValueError(f"heads must be 'all' or 'last', not {heads!r}")
    wanted = reps if heads == "all" else {last: reps[last]}
    return {e: model.heads[e - 1](final_norm(r, model.backbone)) for e, r in wanted.items()}


def met_forward(images: np.ndarray, model: METModel, upto_exit: int | None = None,
                heads: str = "all") -> ForwardResult:
    """Run layers 1..psi(upto_exit) (all by default) and evaluate the reached heads.

    ``heads="last"`` evaluates only the head of ``upto_exit``.
    """
    cfg, plan = model.config, model.plan
    last = plan.num_exits if upto_exit is None else upto_exit
    if not 1 <= last <= plan.num_exits:
        raise IndexError(f"exit {last} outside 1..{plan.num_exits}")
    x = patch_embed(images, model.backbone, cfg)
    cls, Z = _split(x, 1)
    state = TokenState(cls, None, Z)
    counts = []
    for k in range(1, plan.psi(last) + 1):
        counts.append(len(plan.live_at_layer(k)))
        state = met_layer_forward(state, k, model.backbone, model.bank, plan, cfg,
                                  model.merge_mode, model.mask_cross_exit)
    reps = {e: state.captured[e] for e in range(1, last + 1)}
    return ForwardResult(reps, _head_logits(model, reps, last, heads), counts)


def shared_token_forward(images: np.ndarray, model: METModel,
                         upto_exit: int | None = None, heads: str = "all") -> ForwardResult:
    """Ablation: every head reads the same class stream at its own depth."""
    cfg, plan, bank = model.config, model.plan, model.bank
    if not bank.shared:
        raise ConfigError("shared-token forward needs a bank built with shared=True")
    last = plan.num_exits if upto_exit is None else upto_exit
    x = patch_embed(images, model.backbone, cfg)
    cls, Z = _split(x, 1)
    state = TokenState(cls, None, Z)
    reps: dict[int, Tensor] = {}
    for k in range(1, plan.psi(last) + 1):
        lw = model.backbone.layers[k - 1]
        state = shared_adapter_apply(state, 2 * k - 1, bank)
        x = mha(T.concat([state.cls, state.Z], axis=1), lw, cfg.heads)
        cls, Z = _split(x, 1)
        state = shared_adapter_apply(TokenState(cls, None, Z), 2 * k, bank)
        x = ffn(T.concat([state.cls, state.Z], axis=1), lw)
        cls, Z = _split(x, 1)
        state = TokenState(cls, None, Z)
        for e in range(1, last + 1):
            if plan.psi(e) == k:
                reps[e] = T.getitem(cls, (slice(None), 0))
    return ForwardResult(reps, _head_logits(model, reps, last, heads), [1] * plan.psi(last))


class ParamCount(NamedTuple):
    shared: int
    transforms: int
    diagonals: int
    total: int


def count_adapter_params(d: int, dprime: int, L: int, plan: ExitPlan,
                         shared_token: bool = False) -> ParamCount:
    shared = 2 * d * dprime
    transforms = 4 * L * dprime ** 2
    if shared_token:
        diagonals = 2 * L * dprime
    else:
        diagonals = dprime * sum(len(live_exits(m, plan)) for m in range(1, 2 * L + 1))
    return ParamCount(shared, transforms, diagonals, shared + transforms + diagonals)


def closed_form_last3(d: int, dprime: int, L: int) -> int:
    """2dd' + 4Ld'^2 + 6Ld' - 6d' (three exits on the last three layers)."""
    return 2 * d * dprime + 4 * L * dprime ** 2 + 6 * L * dprime - 6 * dprime


def naive_param_count(d: int, dprime: int, L: int) -> int:
    """All-distinct adapters for three trailing exits: 12 d d' (L - 1)."""
    return 12 * d * dprime * (L - 1)


def leading_order_reduction(d: int, dprime: int, L: int) -> float:
    """1 - 2dd' / (12dd'(L-1)): the shared projections against the naive count."""
    return 1.0 - (2 * d * dprime) / naive_param_count(d, dprime, L)
