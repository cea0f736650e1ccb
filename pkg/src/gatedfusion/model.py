"""The gated cross-modal fusion architecture.

Three contextual Bi-GRU encoders (one per modality), bilinear self
attention, pairwise cross attention, a learnable gated fusion kernel per
ordered modality pair, a second Bi-GRU stage fusing everything per
modality, and a two-layer softmax prediction head.  Ablation flags switch
each stage on or off, giving the six configurations B1..B6.

Modalities are named by their initials: T (text), A (audio), V (video).
The six ordered fusion products are keyed "VT", "AT", "TA", "VA", "TV",
"AV", where the second letter names the modality whose contextual
representation is blended with the cross-attended one (e.g. "VT" blends
video-attended text content into the text stream).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

import numpy as np

from . import tensor as tn
from .errors import ConfigError, ContractError, DimensionError
from .layers import (
    BiGruParams,
    DenseParams,
    bigru_forward,
    dense_forward,
    dropout_forward,
    glorot_matrix,
    glorot_vector,
    zeros_param,
)
from .tensor import Tensor

MODALITIES = ("T", "A", "V")

# unordered pairs, each computed with one affinity matrix
PAIRS = (("T", "A"), ("T", "V"), ("A", "V"))

# ordered fusion keys, canonical order used everywhere (concatenation,
# parameter walks, traces): second letter = the stream being augmented
FUSION_KEYS = ("VT", "AT", "TA", "VA", "TV", "AV")

# deep stage inputs: Deep_m consumes (S_m, F_k1, F_k2)
DEEP_INPUTS = {"T": ("VT", "AT"), "A": ("TA", "VA"), "V": ("TV", "AV")}


@dataclass(frozen=True)
class AblationConfig:
    """Which stages of the architecture are active.

    The named ladder:
      B1 ----  contextual encoders only
      B2 s---  + self attention
      B3 -c--  + cross interaction (ungated)
      B4 -cg-  + gating
      B5 scg-  self attention and gated cross interaction
      B6 scgd  full model with deep fusion
    """

    use_self_attention: bool = True
    use_cross_interaction: bool = True
    use_gating: bool = True
    use_deep_fusion: bool = True

    def __post_init__(self):
        if self.use_gating and not self.use_cross_interaction:
            raise ConfigError("gating is part of cross interaction; enable both")
        if self.use_deep_fusion and not (
            self.use_self_attention and self.use_cross_interaction
        ):
            raise ConfigError(
                "deep fusion consumes self-attended and cross-fused streams; "
                "enable use_self_attention and use_cross_interaction"
            )

    @classmethod
    def from_preset(cls, name: str) -> "AblationConfig":
        try:
            flags = PRESETS[name]
        except KeyError:
            raise ConfigError(f"unknown ablation preset {name!r}; choose from {list(PRESETS)}")
        return cls(*flags)

    @property
    def preset_name(self) -> Optional[str]:
        flags = (
            self.use_self_attention,
            self.use_cross_interaction,
            self.use_gating,
            self.use_deep_fusion,
        )
        for name, preset in PRESETS.items():
            if preset == flags:
                return name
        return None


PRESETS = {
    "B1": (False, False, False, False),
    "B2": (True, False, False, False),
    "B3": (False, True, False, False),
    "B4": (False, True, True, False),
    "B5": (True, True, True, False),
    "B6": (True, True, True, True),
}


@dataclass(frozen=True)
class ModelConfig:
    """Static architecture sizes.

    ``hidden`` is the per-direction GRU width h; every modality stream
    then has feature width d = 2h.  ``head_hidden`` defaults to d.
    """

    text_dim: int
    audio_dim: int
    video_dim: int
    hidden: int
    head_hidden: Optional[int] = None

    def __post_init__(self):
        for name in ("text_dim", "audio_dim", "video_dim", "hidden"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")
        if self.head_hidden is not None and self.head_hidden < 1:
            raise ConfigError(f"head_hidden must be positive, got {self.head_hidden}")

    @property
    def d(self) -> int:
        return 2 * self.hidden

    @property
    def head_width(self) -> int:
        return self.head_hidden if self.head_hidden is not None else self.d

    def input_dim(self, modality: str) -> int:
        return {"T": self.text_dim, "A": self.audio_dim, "V": self.video_dim}[modality]


def head_input_width(config: ModelConfig, ablation: AblationConfig) -> int:
    """Width of the feature row handed to the prediction head."""
    if ablation.use_deep_fusion:
        return 3 * config.d
    if ablation.use_cross_interaction:
        return 9 * config.d  # three streams + six fusion products
    return 3 * config.d


@dataclass
class FusionKernelParams:
    """One gated fusion unit for an ordered pair (P, Q).

    W_F/b_F produce the joint transform X from the interaction feature
    Z = [P, Q, P−Q, P∘Q]; W_G/b_G produce one scalar gate per utterance.
    """

    W_F: Tensor  # [d x 4d]
    b_F: Tensor  # [d]
    W_G: Tensor  # [4d]
    b_G: Tensor  # [1]

    @classmethod
    def init(cls, d: int, rng: np.random.Generator) -> "FusionKernelParams":
        return cls(
            W_F=glorot_matrix(rng, d, 4 * d),
            b_F=zeros_param(d),
            W_G=glorot_vector(rng, 4 * d),
            b_G=zeros_param(1),
        )

    def named(self, prefix: str = ""):
        for name in ("W_F", "b_F", "W_G", "b_G"):
            yield prefix + name, getattr(self, name)


@dataclass
class ModelParams:
    """Every trainable tensor in the model, grouped by stage."""

    encoders: Dict[str, BiGruParams]
    self_attn: Dict[str, Tensor]
    cross_attn: Dict[str, Tensor]
    fusion: Dict[str, FusionKernelParams]
    deep: Dict[str, BiGruParams]
    head_hidden: DenseParams
    head_out: DenseParams

    @classmethod
    def init(
        cls,
        config: ModelConfig,
        ablation: AblationConfig,
        rng: np.random.Generator,
    ) -> "ModelParams":
        """Create all parameter groups (including stages the ablation
        disables, so checkpoints stay layout-compatible across flags).
        Draw order follows ``named()`` order and is part of the
        determinism contract."""
        d = config.d
        return cls(
            encoders={
                m: BiGruParams.init(config.input_dim(m), config.hidden, rng)
                for m in MODALITIES
            },
            self_attn={m: glorot_matrix(rng, d, d) for m in MODALITIES},
            cross_attn={a + b: glorot_matrix(rng, d, d) for a, b in PAIRS},
            fusion={k: FusionKernelParams.init(d, rng) for k in FUSION_KEYS},
            deep={m: BiGruParams.init(3 * d, config.hidden, rng) for m in MODALITIES},
            head_hidden=DenseParams.init(
                head_input_width(config, ablation), config.head_width, rng
            ),
            head_out=DenseParams.init(config.head_width, 2, rng),
        )

    def named(self, prefix: str = ""):
        for m in MODALITIES:
            yield from self.encoders[m].named(f"{prefix}encoder.{m}.")
        for m in MODALITIES:
            yield prefix + f"self_attn.{m}", self.self_attn[m]
        for a, b in PAIRS:
            yield prefix + f"cross_attn.{a}{b}", self.cross_attn[a + b]
        for k in FUSION_KEYS:
            yield from self.fusion[k].named(f"{prefix}fusion.{k}.")
        for m in MODALITIES:
            yield from self.deep[m].named(f"{prefix}deep.{m}.")
        yield from self.head_hidden.named(prefix + "head_hidden.")
        yield from self.head_out.named(prefix + "head_out.")


@dataclass
class ForwardTrace:
    """Diagnostics captured during a forward pass (plain numpy copies).

    ``self_attention[m]`` and ``cross_attention[key]`` hold the u x u
    attention matrices actually applied (every stored matrix is
    row-stochastic over real columns for real rows; padded rows/columns
    are zero).  ``self_score_diag[m][i]`` is the attention utterance i
    pays to itself; ``self_score_colmean[m][i]`` is the mean attention
    paid to i by all real utterances.  ``gates[key]`` holds the scalar
    gate per utterance when gating ran.
    """

    mask: np.ndarray
    self_attention: Dict[str, np.ndarray] = field(default_factory=dict)
    self_score_diag: Dict[str, np.ndarray] = field(default_factory=dict)
    self_score_colmean: Dict[str, np.ndarray] = field(default_factory=dict)
    cross_attention: Dict[str, np.ndarray] = field(default_factory=dict)
    gates: Dict[str, np.ndarray] = field(default_factory=dict)


def _square_mask(mask: np.ndarray) -> np.ndarray:
    """Broadcast a length-u real-utterance mask to u x u column masking."""
    u = mask.shape[0]
    return np.tile(mask, (u, 1))


def _indicator(mask: np.ndarray) -> Tensor:
    return Tensor(mask.astype(np.float64))


def self_attention(
    W: Tensor, H: Tensor, mask: np.ndarray
) -> Tuple[Tensor, Tensor]:
    """Bilinear self attention: M = H·W·Hᵀ, A = masked row-softmax(M),
    S = A·H.  Padded rows of A and S are exactly zero."""
    if H.data.ndim != 2 or W.shape != (H.shape[1], H.shape[1]):
        raise DimensionError(f"self_attention width mismatch: W {W.shape}, H {H.shape}")
    M = tn.matmul(tn.matmul(H, W), tn.transpose(H))
    A = tn.softmax_rows(M, mask=_square_mask(mask))
    A = tn.scale_rows(A, _indicator(mask))
    S = tn.matmul(A, H)
    return S, A


@dataclass
class CrossAttentionResult:
    """Both directions of one pair's cross attention.

    For the call (H_P, H_Q): ``C_QP`` carries P-content re-weighted by
    Q-side attention, ``C_PQ`` carries Q-content re-weighted by P-side
    attention; ``A_QP``/``A_PQ`` are the row-stochastic matrices applied
    (so C_QP = A_QP·H_P and C_PQ = A_PQ·H_Q).
    """

    C_QP: Tensor
    C_PQ: Tensor
    A_QP: Tensor
    A_PQ: Tensor


def cross_attention(
    W: Tensor, H_P: Tensor, H_Q: Tensor, mask: np.ndarray
) -> CrossAttentionResult:
    """Pairwise affinity M = H_P·W·H_Qᵀ read in both directions.

    Row-softmax of M attends P-rows over Q-content; the other direction
    softmaxes M column-wise, which is applied through a transpose so both
    outputs are u x d.
    """
    if H_P.shape != H_Q.shape:
        raise DimensionError(f"cross_attention needs equal shapes, got {H_P.shape}, {H_Q.shape}")
    if W.shape != (H_P.shape[1], H_P.shape[1]):
        raise DimensionError(f"cross_attention width mismatch: W {W.shape}, H {H_P.shape}")
    sq = _square_mask(mask)
    ind = _indicator(mask)
    M = tn.matmul(tn.matmul(H_P, W), tn.transpose(H_Q))
    A_PQ = tn.scale_rows(tn.softmax_rows(M, mask=sq), ind)
    A_QP = tn.scale_rows(tn.softmax_rows(tn.transpose(M), mask=sq), ind)
    return CrossAttentionResult(
        C_QP=tn.matmul(A_QP, H_P),
        C_PQ=tn.matmul(A_PQ, H_Q),
        A_QP=A_QP,
        A_PQ=A_PQ,
    )


def fusion_kernel(
    k: FusionKernelParams, P: Tensor, Q: Tensor, use_gate: bool = True
) -> Tuple[Tensor, Optional[Tensor]]:
    """Gated blend of a cross-attended stream P into a contextual stream Q.

    Z = [P, Q, P−Q, P∘Q]; X = tanh(Z·W_Fᵀ + b_F); G = σ(Z·W_G + b_G) as
    one scalar per row; F = G∘X + (1−G)∘Q.  With ``use_gate`` off the
    kernel returns the bare transform F = X and no gate.
    """
    if P.shape != Q.shape:
        raise DimensionError(f"fusion_kernel needs equal shapes, got {P.shape}, {Q.shape}")
    if k.W_F.shape[1] != 4 * P.shape[1]:
        raise DimensionError(
            f"fusion_kernel width mismatch: W_F {k.W_F.shape} for streams {P.shape}"
        )
    Z = tn.concat_cols(P, Q, P - Q, P * Q)
    X = tn.tanh(tn.add_rowvec(tn.matmul(Z, tn.transpose(k.W_F)), k.b_F))
    if not use_gate:
        return X, None
    G = tn.sigmoid(tn.add_scalar(tn.matvec(Z, k.W_G), k.b_G))
    F = tn.scale_rows(X, G) + tn.scale_rows(Q, tn.affine(G, -1.0, 1.0))
    return F, G


def gated_cross_fuse(
    params: ModelParams,
    ablation: AblationConfig,
    H: Dict[str, Tensor],
    mask: np.ndarray,
    trace: ForwardTrace,
) -> Dict[str, Tensor]:
    """All six ordered fusion products from the three pairwise affinities.

    Each unordered pair's cross attention is computed once; its two
    outputs each feed one fusion kernel against the matching contextual
    stream.  Padded rows of every product are zeroed.
    """
    ind = _indicator(mask)
    cross: Dict[str, Tensor] = {}
    for a, b in PAIRS:
        res = cross_attention(params.cross_attn[a + b], H[a], H[b], mask)
        cross[b + a] = res.C_QP  # b-side attention over a-content
        cross[a + b] = res.C_PQ
        trace.cross_attention[b + a] = res.A_QP.data.copy()
        trace.cross_attention[a + b] = res.A_PQ.data.copy()

    fused: Dict[str, Tensor] = {}
    for key in FUSION_KEYS:
        target = key[1]
        F, G = fusion_kernel(
            params.fusion[key], cross[key], H[target], use_gate=ablation.use_gating
        )
        fused[key] = tn.scale_rows(F, ind)
        if G is not None:
            trace.gates[key] = G.data.copy()
    return fused


def deep_fusion(
    p: BiGruParams, S: Tensor, F1: Tensor, F2: Tensor, mask: np.ndarray
) -> Tensor:
    """Second recurrent pass over the per-utterance concatenation
    [S_i, F1_i, F2_i], keeping one row per utterance."""
    if not S.shape == F1.shape == F2.shape:
        raise DimensionError(
            f"deep_fusion needs equal widths, got {S.shape}, {F1.shape}, {F2.shape}"
        )
    return bigru_forward(p, tn.concat_cols(S, F1, F2), mask)


def predict(
    params: ModelParams,
    feats: List[Tensor],
    mode: str = "eval",
    dropout_rate: float = 0.0,
    rng: Optional[np.random.Generator] = None,
) -> Tensor:
    """Concatenate feature streams and map each utterance row to class
    probabilities: dense+ReLU, dropout, dense(2), softmax."""
    x = tn.concat_cols(*feats)
    hidden = dense_forward(params.head_hidden, x, activation="relu")
    if mode == "train" and dropout_rate > 0.0:
        if rng is None:
            raise ContractError("train-mode dropout needs a random generator")
        hidden = dropout_forward(hidden, dropout_rate, mode, rng)
    logits = dense_forward(params.head_out, hidden, activation="none")
    return tn.softmax_rows(logits)


def forward_video(
    params: ModelParams,
    config: ModelConfig,
    ablation: AblationConfig,
    feats: Dict[str, Tensor],
    mask: np.ndarray,
    mode: str = "eval",
    dropout_rate: float = 0.0,
    rng: Optional[np.random.Generator] = None,
) -> Tuple[Tensor, ForwardTrace]:
    """Run one (possibly padded) video through the configured pipeline.

    ``feats[m]`` is the u x dim_m utterance feature sequence for modality
    m; ``mask`` marks real utterances.  Returns u x 2 class probabilities
    (padded rows carry placeholder values — exclude them downstream) and
    the captured :class:`ForwardTrace`.

    Head features per configuration: without deep fusion the streams are
    concatenated as [base_T, base_A, base_V] (+ the six fusion products
    in canonical order when cross interaction is on), where base is the
    self-attended stream when self attention is on, the contextual stream
    otherwise.  With deep fusion the three deep streams are concatenated.
    """
    mask = np.asarray(mask, dtype=bool)
    u = mask.shape[0]
    for m in MODALITIES:
        want = (u, config.input_dim(m))
        if feats[m].shape != want:
            raise DimensionError(
                f"modality {m} features have shape {feats[m].shape}, expected {want}"
            )
    if mode not in ("train", "eval"):
        raise ContractError(f"unknown mode {mode!r}")
    if mode == "train" and dropout_rate > 0.0 and rng is None:
        raise ContractError("train-mode dropout needs a random generator")

    trace = ForwardTrace(mask=mask.copy())
    real = mask.sum()

    H: Dict[str, Tensor] = {}
    for m in MODALITIES:
        h = bigru_forward(params.encoders[m], feats[m], mask)
        if mode == "train" and dropout_rate > 0.0:
            h = dropout_forward(h, dropout_rate, mode, rng)
        H[m] = h

    S: Dict[str, Tensor] = {}
    if ablation.use_self_attention:
        for m in MODALITIES:
            S[m], A = self_attention(params.self_attn[m], H[m], mask)
            a = A.data.copy()
            trace.self_attention[m] = a
            trace.self_score_diag[m] = np.where(mask, np.diagonal(a), 0.0)
            colmean = a[mask].mean(axis=0) if real else np.zeros(u)
            trace.self_score_colmean[m] = np.where(mask, colmean, 0.0)

    fused: Dict[str, Tensor] = {}
    if ablation.use_cross_interaction:
        fused = gated_cross_fuse(params, ablation, H, mask, trace)

    base = S if ablation.use_self_attention else H
    if ablation.use_deep_fusion:
        feats_list = [
            deep_fusion(
                params.deep[m],
                S[m],
                fused[DEEP_INPUTS[m][0]],
                fused[DEEP_INPUTS[m][1]],
                mask,
            )
            for m in MODALITIES
        ]
    else:
        feats_list = [base[m] for m in MODALITIES]
        if ablation.use_cross_interaction:
            feats_list += [fused[k] for k in FUSION_KEYS]

    probs = predict(params, feats_list, mode=mode, dropout_rate=dropout_rate, rng=rng)
    return probs, trace
