"""Dataset model, JSONL ingestion, padding, and a synthetic generator.

The interchange format is JSONL, one video per line:

    {"id": str, "utterances": [{"text": [...], "audio": [...],
     "video": [...], "label": 0|1, "score": optional float}]}

All utterances in a file must share per-modality feature dimensions.

The synthetic generator builds datasets whose labels require combining
modalities: each utterance carries latent cue bits rendered as noisy
anchor vectors, and in ``xor`` mode any single modality is statistically
independent of the label while pairs decode it exactly.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .errors import ContractError, ParseError, SchemaError

MAX_UTTERANCES = 100

# modality initial -> utterance field, in canonical order
MODALITY_FIELDS = {"T": "text_feat", "A": "audio_feat", "V": "video_feat"}

INTERACTION_MODES = ("xor", "majority", "redundant")


@dataclass
class Utterance:
    text_feat: np.ndarray
    audio_feat: np.ndarray
    video_feat: np.ndarray
    label: int
    score: Optional[float] = None

    def __post_init__(self):
        self.text_feat = np.asarray(self.text_feat, dtype=np.float64)
        self.audio_feat = np.asarray(self.audio_feat, dtype=np.float64)
        self.video_feat = np.asarray(self.video_feat, dtype=np.float64)
        for name in ("text_feat", "audio_feat", "video_feat"):
            if getattr(self, name).ndim != 1:
                raise SchemaError(f"{name} must be a flat vector")
        if self.label not in (0, 1):
            raise SchemaError(f"label must be 0 or 1, got {self.label!r}")
        if self.score is not None:
            self.score = float(self.score)
            if self.label != (1 if self.score >= 0 else 0):
                raise SchemaError(
                    f"label {self.label} inconsistent with score {self.score}"
                )

    def dims(self) -> Tuple[int, int, int]:
        return (len(self.text_feat), len(self.audio_feat), len(self.video_feat))


@dataclass
class Video:
    id: str
    utterances: List[Utterance]

    def __post_init__(self):
        n = len(self.utterances)
        if not 1 <= n <= MAX_UTTERANCES:
            raise SchemaError(
                f"video {self.id!r} has {n} utterances; allowed range is 1..{MAX_UTTERANCES}"
            )
        dims = self.utterances[0].dims()
        for utt in self.utterances[1:]:
            if utt.dims() != dims:
                raise SchemaError(
                    f"video {self.id!r} mixes feature dims {dims} and {utt.dims()}"
                )

    def __len__(self) -> int:
        return len(self.utterances)

    def dims(self) -> Tuple[int, int, int]:
        return self.utterances[0].dims()

    def feature_matrix(self, modality: str) -> np.ndarray:
        """Stack one modality's utterance vectors into a [u x dim] array."""
        fld = MODALITY_FIELDS[modality]
        return np.stack([getattr(u, fld) for u in self.utterances])

    def labels(self) -> np.ndarray:
        return np.array([u.label for u in self.utterances], dtype=np.int64)


@dataclass
class Batch:
    """Videos stacked to a common utterance count.

    ``mask[i, t]`` is True exactly at real utterances; padded feature
    rows and labels are zero.
    """

    ids: List[str]
    text: np.ndarray  # [b, u_max, d_T]
    audio: np.ndarray  # [b, u_max, d_A]
    video: np.ndarray  # [b, u_max, d_V]
    mask: np.ndarray  # [b, u_max] bool
    labels: np.ndarray  # [b, u_max] int

    @property
    def size(self) -> int:
        return len(self.ids)

    def features(self, i: int) -> Dict[str, np.ndarray]:
        """Per-modality padded feature matrices of video i, keyed by initial."""
        return {"T": self.text[i], "A": self.audio[i], "V": self.video[i]}


def _check_shared_dims(videos: Sequence[Video]) -> Tuple[int, int, int]:
    dims = videos[0].dims()
    for v in videos[1:]:
        if v.dims() != dims:
            raise SchemaError(
                f"video {v.id!r} has feature dims {v.dims()}, expected {dims}"
            )
    return dims


def pad_batch(videos: Sequence[Video]) -> Batch:
    """Zero-pad videos to the longest length, recording the real-row mask."""
    if not videos:
        raise ContractError("pad_batch needs at least one video")
    d_t, d_a, d_v = _check_shared_dims(videos)
    b = len(videos)
    u_max = max(len(v) for v in videos)
    batch = Batch(
        ids=[v.id for v in videos],
        text=np.zeros((b, u_max, d_t)),
        audio=np.zeros((b, u_max, d_a)),
        video=np.zeros((b, u_max, d_v)),
        mask=np.zeros((b, u_max), dtype=bool),
        labels=np.zeros((b, u_max), dtype=np.int64),
    )
    for i, v in enumerate(videos):
        u = len(v)
        batch.text[i, :u] = v.feature_matrix("T")
        batch.audio[i, :u] = v.feature_matrix("A")
        batch.video[i, :u] = v.feature_matrix("V")
        batch.mask[i, :u] = True
        batch.labels[i, :u] = v.labels()
    return batch


# ---------------------------------------------------------------------------
# JSONL ingestion


def _utterance_from_json(obj, video_id: str, index: int) -> Utterance:
    if not isinstance(obj, dict):
        raise SchemaError(f"video {video_id!r} utterance {index} is not an object")
    for key in ("text", "audio", "video", "label"):
        if key not in obj:
            raise SchemaError(f"video {video_id!r} utterance {index} lacks {key!r}")
    unknown = set(obj) - {"text", "audio", "video", "label", "score"}
    if unknown:
        raise SchemaError(
            f"video {video_id!r} utterance {index} has unknown keys {sorted(unknown)}"
        )
    for key in ("text", "audio", "video"):
        val = obj[key]
        if not isinstance(val, list) or not all(
            isinstance(x, (int, float)) and not isinstance(x, bool) for x in val
        ):
            raise SchemaError(
                f"video {video_id!r} utterance {index}: {key!r} must be a list of numbers"
            )
    if obj["label"] not in (0, 1) or isinstance(obj["label"], bool):
        raise SchemaError(
            f"video {video_id!r} utterance {index}: label must be 0 or 1"
        )
    score = obj.get("score")
    if score is not None and (isinstance(score, bool) or not isinstance(score, (int, float))):
        raise SchemaError(f"video {video_id!r} utterance {index}: score must be a number")
    try:
        return Utterance(
            text_feat=np.array(obj["text"], dtype=np.float64),
            audio_feat=np.array(obj["audio"], dtype=np.float64),
            video_feat=np.array(obj["video"], dtype=np.float64),
            label=int(obj["label"]),
            score=score,
        )
    except SchemaError as e:
        raise SchemaError(f"video {video_id!r} utterance {index}: {e}") from None


def _video_from_json(obj, line_no: int) -> Video:
    if not isinstance(obj, dict):
        raise SchemaError(f"line {line_no}: video entry is not an object")
    if "id" not in obj or not isinstance(obj["id"], str):
        raise SchemaError(f"line {line_no}: video needs a string 'id'")
    vid = obj["id"]
    unknown = set(obj) - {"id", "utterances"}
    if unknown:
        raise SchemaError(f"video {vid!r} has unknown keys {sorted(unknown)}")
    utts = obj.get("utterances")
    if not isinstance(utts, list) or not utts:
        raise SchemaError(f"video {vid!r} needs a non-empty 'utterances' list")
    return Video(
        id=vid,
        utterances=[_utterance_from_json(u, vid, i) for i, u in enumerate(utts)],
    )


def load_dataset(path) -> List[Video]:
    """Read a JSONL dataset, validating structure and dim consistency."""
    videos: List[Video] = []
    with open(path, encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as e:
                raise ParseError(f"line {line_no}: {e.msg}") from None
            videos.append(_video_from_json(obj, line_no))
    if videos:
        _check_shared_dims(videos)
    return videos


def save_dataset(videos: Sequence[Video], path) -> None:
    """Write videos as JSONL; floats use shortest round-trip repr."""
    with open(path, "w", encoding="utf-8") as fh:
        for v in videos:
            record = {
                "id": v.id,
                "utterances": [
                    {
                        "text": u.text_feat.tolist(),
                        "audio": u.audio_feat.tolist(),
                        "video": u.video_feat.tolist(),
                        "label": int(u.label),
                        **({"score": u.score} if u.score is not None else {}),
                    }
                    for u in v.utterances
                ],
            }
            fh.write(json.dumps(record) + "\n")


# ---------------------------------------------------------------------------
# synthetic generation


@dataclass(frozen=True)
class SyntheticSpec:
    """Controls for the synthetic multimodal generator.

    ``interaction_mode``:
      * ``xor`` — one randomly chosen modality carries a random bit r,
        the other two carry r XOR label, so every single modality is
        independent of the label but modality pairs decode it;
      * ``majority`` — three independent cue bits, label = their majority
        (each modality alone is partially informative);
      * ``redundant`` — every modality's cue equals the label.

    Each cue bit is rendered as one of two anchor vectors (drawn once per
    dataset) plus Gaussian jitter; with probability ``*_noise`` a
    modality's vector is replaced by pure noise, erasing its cue.
    """

    n_videos: int
    min_utterances: int = 2
    max_utterances: int = 6
    text_dim: int = 8
    audio_dim: int = 8
    video_dim: int = 8
    seed: int = 0
    text_noise: float = 0.0
    audio_noise: float = 0.0
    video_noise: float = 0.0
    interaction_mode: str = "xor"
    jitter: float = 0.15

    def __post_init__(self):
        if self.n_videos < 1:
            raise ContractError(f"n_videos must be positive, got {self.n_videos}")
        if not 1 <= self.min_utterances <= self.max_utterances <= MAX_UTTERANCES:
            raise ContractError(
                f"utterance range {self.min_utterances}..{self.max_utterances} invalid"
            )
        for name in ("text_dim", "audio_dim", "video_dim"):
            if getattr(self, name) < 1:
                raise ContractError(f"{name} must be positive")
        for name in ("text_noise", "audio_noise", "video_noise"):
            p = getattr(self, name)
            if not 0.0 <= p <= 1.0:
                raise ContractError(f"{name} must be a probability, got {p}")
        if self.interaction_mode not in INTERACTION_MODES:
            raise ContractError(
                f"interaction_mode must be one of {INTERACTION_MODES}, "
                f"got {self.interaction_mode!r}"
            )
        if self.jitter < 0:
            raise ContractError(f"jitter must be non-negative, got {self.jitter}")


def synth_generate(spec: SyntheticSpec) -> List[Video]:
    """Generate a synthetic dataset; same spec (incl. seed) -> same data."""
    rng = np.random.default_rng(spec.seed)
    dims = (spec.text_dim, spec.audio_dim, spec.video_dim)
    noise = (spec.text_noise, spec.audio_noise, spec.video_noise)
    # two anchor vectors per modality, one per cue-bit value
    anchors = [rng.normal(size=(2, d)) for d in dims]

    videos: List[Video] = []
    for vi in range(spec.n_videos):
        u = int(rng.integers(spec.min_utterances, spec.max_utterances + 1))
        utts: List[Utterance] = []
        for _ in range(u):
            y = int(rng.integers(0, 2))
            if spec.interaction_mode == "redundant":
                cues = [y, y, y]
            elif spec.interaction_mode == "majority":
                cues = [int(b) for b in rng.integers(0, 2, size=3)]
                y = int(sum(cues) >= 2)
            else:  # xor
                carrier = int(rng.integers(0, 3))
                r = int(rng.integers(0, 2))
                cues = [r ^ y] * 3
                cues[carrier] = r
            feats = []
            for m in range(3):
                vec = anchors[m][cues[m]] + spec.jitter * rng.normal(size=dims[m])
                corrupt = rng.random() < noise[m]
                if corrupt:
                    vec = rng.normal(size=dims[m])
                feats.append(vec)
            magnitude = float(rng.uniform(0.25, 1.0))
            score = magnitude if y == 1 else -magnitude
            utts.append(
                Utterance(
                    text_feat=feats[0],
                    audio_feat=feats[1],
                    video_feat=feats[2],
                    label=y,
                    score=score,
                )
            )
        videos.append(Video(id=f"synth-{vi:04d}", utterances=utts))
    return videos


def split(
    videos: Sequence[Video], fractions: Tuple[float, float, float], seed: int
) -> Tuple[List[Video], List[Video], List[Video]]:
    """Shuffle videos with the given seed and cut into train/val/test.

    Splitting is by whole video, so no video straddles subsets.
    """
    if len(fractions) != 3 or any(f < 0 for f in fractions):
        raise ContractError(f"fractions must be three non-negative values, got {fractions}")
    if abs(sum(fractions) - 1.0) > 1e-9:
        raise ContractError(f"fractions must sum to 1, got {fractions}")
    order = np.random.default_rng(seed).permutation(len(videos))
    shuffled = [videos[i] for i in order]
    n = len(videos)
    n_train = int(round(fractions[0] * n))
    n_val = int(round((fractions[0] + fractions[1]) * n)) - n_train
    return (
        shuffled[:n_train],
        shuffled[n_train : n_train + n_val],
        shuffled[n_train + n_val :],
    )
