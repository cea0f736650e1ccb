"""Command-line interface: synth, train, eval, inspect, gradcheck.

Every option can come from the command line or from a JSON config file
(``--config``); explicit flags win.  Exit codes are a stable contract:
0 success, 1 check failure, 2 usage/config error, 3 training divergence.
"""

from __future__ import annotations

import argparse
import json
import sys
from typing import Dict, Optional

import numpy as np

from .checkpoint import LoadedCheckpoint, load_checkpoint, save_checkpoint
from .data import SyntheticSpec, Video, load_dataset, save_dataset, synth_generate
from .errors import (
    CheckpointError,
    ConfigError,
    ContractError,
    DegenerateMaskError,
    DimensionError,
    ParseError,
    SchemaError,
    TrainingError,
)
from .model import (
    FUSION_KEYS,
    MODALITIES,
    AblationConfig,
    ModelConfig,
    ModelParams,
    forward_video,
)
from .tensor import Tensor
from .training import (
    TrainConfig,
    evaluate,
    model_grad_check,
    predict_videos,
    train,
    write_metrics_csv,
    write_predictions_csv,
)

CONFIG_KEYS = frozenset(
    {
        "seed", "lr", "batch_size", "epochs", "dropout", "hidden", "head_hidden",
        "ablation", "max_grad_norm", "train_path", "val_path", "data_path",
        "checkpoint", "metrics_csv", "predictions_csv", "out", "videos",
        "min_utterances", "max_utterances", "text_dim", "audio_dim", "video_dim",
        "mode", "text_noise", "audio_noise", "video_noise", "jitter",
        "epsilon", "samples", "threshold", "dims", "utterances",
    }
)


def _load_config(path: Optional[str]) -> Dict:
    if path is None:
        return {}
    with open(path, encoding="utf-8") as fh:
        try:
            doc = json.load(fh)
        except json.JSONDecodeError as e:
            raise ConfigError(f"config file {path}: {e}") from None
    if not isinstance(doc, dict):
        raise ConfigError(f"config file {path} must hold a JSON object")
    for key in doc:
        if key not in CONFIG_KEYS:
            raise ConfigError(f"unknown config field {key!r}")
    return doc


def _resolve(ns, config: Dict, key: str, default=None):
    value = getattr(ns, key, None)
    if value is not None:
        return value
    if key in config:
        return config[key]
    return default


def _require(ns, config: Dict, key: str, flag: str):
    value = _resolve(ns, config, key)
    if value is None:
        raise ConfigError(f"missing required option {flag} (config field {key!r})")
    return value


def _ablation(name: str) -> AblationConfig:
    return AblationConfig.from_preset(str(name).upper())


# ---------------------------------------------------------------------------
# commands


def cmd_synth(ns) -> int:
    config = _load_config(ns.config)
    out = _require(ns, config, "out", "--out")
    n = int(_resolve(ns, config, "videos", 20))
    dims = (
        int(_resolve(ns, config, "text_dim", 8)),
        int(_resolve(ns, config, "audio_dim", 8)),
        int(_resolve(ns, config, "video_dim", 8)),
    )
    if n == 0:
        with open(out, "w", encoding="utf-8"):
            pass
        print(f"wrote {out}: 0 videos, 0 utterances, dims {dims}")
        return 0
    spec = SyntheticSpec(
        n_videos=n,
        min_utterances=int(_resolve(ns, config, "min_utterances", 2)),
        max_utterances=int(_resolve(ns, config, "max_utterances", 6)),
        text_dim=dims[0],
        audio_dim=dims[1],
        video_dim=dims[2],
        seed=int(_resolve(ns, config, "seed", 0)),
        text_noise=float(_resolve(ns, config, "text_noise", 0.0)),
        audio_noise=float(_resolve(ns, config, "audio_noise", 0.0)),
        video_noise=float(_resolve(ns, config, "video_noise", 0.0)),
        interaction_mode=str(_resolve(ns, config, "mode", "xor")),
        jitter=float(_resolve(ns, config, "jitter", 0.15)),
    )
    videos = synth_generate(spec)
    save_dataset(videos, out)
    total = sum(len(v) for v in videos)
    print(f"wrote {out}: {len(videos)} videos, {total} utterances, dims {dims}")
    return 0


def _train_config(ns, config: Dict) -> TrainConfig:
    mgn = _resolve(ns, config, "max_grad_norm")
    return TrainConfig(
        lr=float(_resolve(ns, config, "lr", 0.0005)),
        batch_size=int(_resolve(ns, config, "batch_size", 16)),
        epochs=int(_resolve(ns, config, "epochs", 75)),
        dropout=float(_resolve(ns, config, "dropout", 0.4)),
        hidden=int(_resolve(ns, config, "hidden", 100)),
        seed=int(_resolve(ns, config, "seed", 0)),
        ablation=_ablation(_resolve(ns, config, "ablation", "b6")),
        max_grad_norm=None if mgn is None else float(mgn),
    )


def cmd_train(ns) -> int:
    config = _load_config(ns.config)
    train_path = _require(ns, config, "train_path", "--train")
    train_videos = load_dataset(train_path)
    if not train_videos:
        raise ConfigError(f"training dataset {train_path} is empty")
    val_path = _resolve(ns, config, "val_path")
    val_videos = load_dataset(val_path) if val_path else None

    tc = _train_config(ns, config)
    dims = train_videos[0].dims()
    head_hidden = _resolve(ns, config, "head_hidden")
    mc = ModelConfig(
        text_dim=dims[0],
        audio_dim=dims[1],
        video_dim=dims[2],
        hidden=tc.hidden,
        head_hidden=None if head_hidden is None else int(head_hidden),
    )
    params = ModelParams.init(mc, tc.ablation, np.random.default_rng([tc.seed, 0]))
    result = train(params, mc, train_videos, val_videos, tc)

    ckpt_path = _resolve(ns, config, "checkpoint", "model.ckpt")
    metrics_path = _resolve(ns, config, "metrics_csv", "metrics.csv")
    save_checkpoint(ckpt_path, result.params, mc, tc.ablation, tc.seed)
    write_metrics_csv(result.history, metrics_path)
    final = evaluate(
        result.params, mc, tc.ablation, val_videos if val_videos else train_videos
    )
    print(f"checkpoint={ckpt_path} metrics={metrics_path}")
    print(f"val_acc={final.accuracy:.4f} val_f1={final.f1:.4f}")
    return 0


def _load_for_data(ns, config) -> tuple:
    ckpt = load_checkpoint(_require(ns, config, "checkpoint", "--checkpoint"))
    data_path = _require(ns, config, "data_path", "--data")
    videos = load_dataset(data_path)
    mc = ckpt.model_config
    want = (mc.text_dim, mc.audio_dim, mc.video_dim)
    if videos and videos[0].dims() != want:
        raise ConfigError(
            f"dataset dims {videos[0].dims()} do not match checkpoint dims {want}"
        )
    return ckpt, videos


def cmd_eval(ns) -> int:
    config = _load_config(ns.config)
    ckpt, videos = _load_for_data(ns, config)
    metrics = evaluate(ckpt.params, ckpt.model_config, ckpt.ablation, videos)
    preds = predict_videos(ckpt.params, ckpt.model_config, ckpt.ablation, videos)
    pred_path = _resolve(ns, config, "predictions_csv", "predictions.csv")
    write_predictions_csv(preds, pred_path)
    print(f"accuracy={metrics.accuracy:.4f} f1={metrics.f1:.4f}")
    return 0


def _inspect_report(ckpt: LoadedCheckpoint, video: Video) -> Dict:
    feats = {m: Tensor(video.feature_matrix(m)) for m in MODALITIES}
    mask = np.ones(len(video), dtype=bool)
    _, trace = forward_video(
        ckpt.params, ckpt.model_config, ckpt.ablation, feats, mask, mode="eval"
    )
    report: Dict = {
        "video_id": video.id,
        "n_utterances": len(video),
        "ablation": ckpt.ablation.preset_name or "custom",
        "self_scores": {
            m: {
                "diag": trace.self_score_diag[m].tolist(),
                "colmean": trace.self_score_colmean[m].tolist(),
            }
            for m in trace.self_attention
        },
        "gates": {k: trace.gates[k].tolist() for k in FUSION_KEYS if k in trace.gates},
    }
    report["gate_averages"] = {
        k: float(np.mean(v)) for k, v in report["gates"].items()
    }
    return report


def _print_inspect_text(report: Dict) -> None:
    print(
        f"video {report['video_id']}: {report['n_utterances']} utterances "
        f"(ablation {report['ablation']})"
    )
    self_scores = report["self_scores"]
    gates = report["gates"]
    if not self_scores and not gates:
        print("no attention or gating stages active in this checkpoint")
        return
    columns = ["utt"]
    for m in self_scores:
        columns += [f"S_{m}_diag", f"S_{m}_col"]
    columns += [f"G_{k}" for k in gates]
    print("  ".join(f"{c:>9}" for c in columns))
    for i in range(report["n_utterances"]):
        cells = [f"{i:>9}"]
        for m in self_scores:
            cells.append(f"{self_scores[m]['diag'][i]:9.4f}")
            cells.append(f"{self_scores[m]['colmean'][i]:9.4f}")
        for k in gates:
            cells.append(f"{gates[k][i]:9.4f}")
        print("  ".join(cells))
    if report["gate_averages"]:
        avg = "  ".join(f"G_{k}={v:.4f}" for k, v in report["gate_averages"].items())
        print(f"pair averages: {avg}")


def cmd_inspect(ns) -> int:
    config = _load_config(ns.config)
    ckpt, videos = _load_for_data(ns, config)
    wanted = ns.video
    match = next((v for v in videos if v.id == wanted), None)
    if match is None:
        raise ConfigError(f"video id {wanted!r} not found in dataset")
    report = _inspect_report(ckpt, match)
    if ns.json:
        print(json.dumps(report, indent=2))
    else:
        _print_inspect_text(report)
    return 0


def cmd_gradcheck(ns) -> int:
    config = _load_config(ns.config)
    hidden = int(_resolve(ns, config, "hidden", 3))
    dims = int(_resolve(ns, config, "dims", 4))
    utterances = int(_resolve(ns, config, "utterances", 4))
    n_videos = int(_resolve(ns, config, "videos", 2))
    epsilon = float(_resolve(ns, config, "epsilon", 1e-5))
    samples = int(_resolve(ns, config, "samples", 200))
    threshold = float(_resolve(ns, config, "threshold", 1e-4))
    seed = int(_resolve(ns, config, "seed", 0))
    ablation = _ablation(_resolve(ns, config, "ablation", "b6"))

    data = synth_generate(
        SyntheticSpec(
            n_videos=n_videos,
            min_utterances=utterances,
            max_utterances=utterances,
            text_dim=dims,
            audio_dim=dims,
            video_dim=dims,
            seed=seed,
        )
    )
    mc = ModelConfig(text_dim=dims, audio_dim=dims, video_dim=dims, hidden=hidden)
    params = ModelParams.init(mc, ablation, np.random.default_rng([seed, 0]))
    report = model_grad_check(
        params, mc, ablation, data, epsilon=epsilon, sample_size=samples, seed=seed
    )
    print(
        f"checked {report.n_coords} coordinates: "
        f"max_rel_err={report.max_rel_err:.3e} mean_rel_err={report.mean_rel_err:.3e}"
    )
    if report.max_rel_err < threshold:
        print("gradient check passed")
        return 0
    print(f"gradient check FAILED at {report.worst} (threshold {threshold:g})")
    return 1


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="gatedfusion",
        description="Gated cross-modal fusion for utterance-level sentiment",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="JSON config file; flags override it")
        p.add_argument("--seed", type=int, help="random seed")

    p = sub.add_parser("synth", help="generate a synthetic JSONL dataset")
    common(p)
    p.add_argument("--out", help="output JSONL path")
    p.add_argument("--videos", type=int, help="number of videos")
    p.add_argument("--min-utterances", type=int, dest="min_utterances")
    p.add_argument("--max-utterances", type=int, dest="max_utterances")
    p.add_argument("--text-dim", type=int, dest="text_dim")
    p.add_argument("--audio-dim", type=int, dest="audio_dim")
    p.add_argument("--video-dim", type=int, dest="video_dim")
    p.add_argument("--mode", choices=("xor", "majority", "redundant"))
    p.add_argument("--text-noise", type=float, dest="text_noise")
    p.add_argument("--audio-noise", type=float, dest="audio_noise")
    p.add_argument("--video-noise", type=float, dest="video_noise")
    p.add_argument("--jitter", type=float)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train a model and write checkpoint + metrics")
    common(p)
    p.add_argument("--train", dest="train_path", help="training JSONL")
    p.add_argument("--val", dest="val_path", help="validation JSONL")
    p.add_argument("--ablation", help="b1..b6 (default b6)")
    p.add_argument("--epochs", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--batch-size", type=int, dest="batch_size")
    p.add_argument("--dropout", type=float)
    p.add_argument("--hidden", type=int)
    p.add_argument("--head-hidden", type=int, dest="head_hidden")
    p.add_argument("--max-grad-norm", type=float, dest="max_grad_norm")
    p.add_argument("--checkpoint", help="checkpoint output path")
    p.add_argument("--metrics", dest="metrics_csv", help="metrics CSV output path")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a dataset")
    common(p)
    p.add_argument("--checkpoint")
    p.add_argument("--data", dest="data_path")
    p.add_argument("--predictions", dest="predictions_csv")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("inspect", help="report attention scores and gates for one video")
    common(p)
    p.add_argument("--checkpoint")
    p.add_argument("--data", dest="data_path")
    p.add_argument("--video", required=True, help="video id to inspect")
    p.add_argument("--json", action="store_true", help="emit JSON instead of text")
    p.set_defaults(func=cmd_inspect)

    p = sub.add_parser("gradcheck", help="finite-difference gradient check")
    common(p)
    p.add_argument("--hidden", type=int)
    p.add_argument("--dims", type=int, help="feature dim for all three modalities")
    p.add_argument("--utterances", type=int)
    p.add_argument("--videos", type=int)
    p.add_argument("--epsilon", type=float)
    p.add_argument("--samples", type=int)
    p.add_argument("--threshold", type=float)
    p.add_argument("--ablation", help="b1..b6 (default b6)")
    p.set_defaults(func=cmd_gradcheck)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        ns = parser.parse_args(argv)
    except SystemExit as e:
        return 0 if e.code in (0, None) else 2
    try:
        return ns.func(ns)
    except TrainingError as e:
        print(f"error: {e}", file=sys.stderr)
        return 3
    except (
        ConfigError,
        ContractError,
        SchemaError,
        ParseError,
        CheckpointError,
        DimensionError,
        DegenerateMaskError,
        OSError,
    ) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


def main_entry() -> None:
    raise SystemExit(main())
