"""Command-line front end: gen-corpus, embed, train-flow, score, mine,
and report, wired over the corpus directory formats.

Exit codes: 0 success, 2 validation error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import dataclass

import numpy as np

from . import embed as embed_mod
from . import flow as flow_mod
from . import mining, report, scoring, storage
from .corpus import CorpusSpec, generate_corpus
from .errors import NumericalError, RemError, ValidationError


@dataclass
class _GtObjectRow:
    """Adapter so ground-truth boxes can ride the pooling pipeline."""

    detection_id: str
    segment_id: str
    frame_index: int
    box: object


def _load_config(path, command: str) -> dict:
    if path is None:
        return {}
    with open(path) as fh:
        cfg = json.load(fh)
    if not isinstance(cfg, dict):
        raise ValidationError(f"{path}: config must be a JSON object")
    return cfg.get(command, cfg) if command in cfg else cfg


def _say(args, message: str) -> None:
    if not args.quiet:
        print(message)


# -- subcommands ---------------------------------------------------------


def cmd_gen_corpus(args) -> None:
    with open(args.spec) as fh:
        spec_obj = json.load(fh)
    if args.seed is not None:
        spec_obj["seed"] = args.seed
    spec = CorpusSpec.from_json(spec_obj)
    corpus = generate_corpus(spec)
    noise = mining.AutoLabelNoise.from_json(spec.autolabel)
    auto_seed = int(np.random.SeedSequence(spec.seed).generate_state(2)[1])
    auto = mining.simulate_autolabels(corpus.gt_tracks, noise, auto_seed)
    storage.write_corpus(corpus, args.out, auto_tracks=auto)
    _say(args, f"wrote corpus: {len(corpus.segments)} segments, "
               f"{len(corpus.gt_tracks)} tracks, "
               f"{len(corpus.detections)} detections, "
               f"{len(auto)} auto tracks -> {args.out}")


def _parse_models(text: str):
    if text == "all":
        return None
    try:
        return {int(tok) for tok in text.split(",")}
    except ValueError as err:
        raise ValidationError(f"bad --models value {text!r}") from err


def cmd_embed(args) -> None:
    reader = storage.CorpusReader(args.corpus)
    models = _parse_models(args.models)
    if args.boxes == "predicted":
        rows = [d for d in reader.detections()
                if models is None or d.model_id in models]
    else:
        rows = [_GtObjectRow(f"gt/{t.track_id}/f{f}", t.segment_id, f, box)
                for t in reader.gt_tracks() for f, box in t.boxes.items()]
    if not rows:
        raise ValidationError("no boxes to embed with the given filters")
    rows.sort(key=lambda r: (r.segment_id, r.frame_index, r.detection_id))
    pooled = []
    for row in rows:
        fmap = reader.feature_map(row.segment_id)
        pooled.append(embed_mod.roi_max_pool(fmap, row.box, reader.geometry))
    x_roi = np.stack(pooled)
    if args.pca_in:
        transform = embed_mod.load_pca(args.pca_in)
    else:
        transform = embed_mod.fit_pca(x_roi, args.k)
        embed_mod.save_pca(transform, args.pca_out)
    records = [embed_mod.EmbeddingRecord(
        row.detection_id, roi, embed_mod.apply_embedding(transform, roi))
        for row, roi in zip(rows, x_roi)]
    embed_mod.save_embeddings_csv(records, args.out)
    _say(args, f"embedded {len(records)} boxes (k={transform.k}) -> {args.out}")


def cmd_train_flow(args) -> None:
    cfg_obj = _load_config(args.config, "train-flow")
    config = flow_mod.FlowConfig.from_json(cfg_obj)
    if args.seed is not None:
        config.seed = args.seed
    ids, X = embed_mod.load_embeddings_csv(args.embeddings)
    model = flow_mod.train_flow(X, config, pca_ref=args.pca_ref,
                                quiet=args.quiet)
    with open(args.out, "w") as fh:
        json.dump(model.to_json(), fh, indent=2)
        fh.write("\n")
    _say(args, f"trained {config.variant} flow on {len(ids)} embeddings, "
               f"final NLL {model.history[-1]:.4f} -> {args.out}")


def _load_model(path) -> flow_mod.FlowModel:
    with open(path) as fh:
        return flow_mod.FlowModel.from_json(json.load(fh))


def cmd_score(args) -> None:
    hard_cfg = scoring.HardFilterConfig(args.point_threshold,
                                        args.range_threshold)
    rareness = None
    if args.method in ("d-rem", "md-rem"):
        if not (args.model and args.embeddings):
            raise ValidationError(
                f"method {args.method} needs --model and --embeddings")
        model = _load_model(args.model)
        ids, X = embed_mod.load_embeddings_csv(args.embeddings)
        rareness = {i: float(r)
                    for i, r in zip(ids, flow_mod.rareness_data(model, X))}
    if args.detections is None:
        if args.method != "d-rem":
            raise ValidationError(
                f"method {args.method} needs --detections")
        records = [scoring.ScoreRecord(i, None, "d-rem", rareness[i], None)
                   for i in sorted(rareness)]
    else:
        detections = [storage.DetectionRecord.from_json(obj)
                      for obj in storage.read_jsonl(args.detections)]
        records = scoring.score_detections(
            args.method, detections, hard_cfg, rareness_by_id=rareness,
            iou_threshold=args.iou_threshold,
            ensemble_size=args.ensemble_size,
            seed=args.seed if args.seed is not None else 0)
    scoring.save_scores_jsonl(records, args.out)
    _say(args, f"scored {len(records)} candidates ({args.method}) -> {args.out}")


def cmd_mine(args) -> None:
    score_rows = scoring.load_scores_jsonl(args.scores)
    if not score_rows:
        raise ValidationError(f"{args.scores}: no score rows")
    methods = {r.method for r in score_rows}
    if len(methods) > 1:
        raise ValidationError(f"scores file mixes methods: {sorted(methods)}")
    method = methods.pop()
    if method == "md-rem" and not args.keep_filtered:
        score_rows = [r for r in score_rows if r.hard_bit == 1]
    detections = {d.detection_id: d
                  for d in (storage.DetectionRecord.from_json(obj)
                            for obj in storage.read_jsonl(args.detections))}
    missing = [r.detection_id for r in score_rows
               if r.detection_id not in detections]
    if missing:
        raise ValidationError(
            f"{len(missing)} scored ids missing from detections "
            f"(first: {missing[0]})")
    ranked = mining.rank_candidates(
        [(detections[r.detection_id], r.score) for r in score_rows])
    gt_tracks = mining.load_tracks_jsonl(args.gt)
    auto = mining.TrackSet()
    for obj in storage.read_jsonl(args.auto):
        auto.add(storage.GroundTruthTrack.from_json(obj), "auto")
    result = mining.mine_tracks(
        ranked, lambda d: mining.simulate_oracle(d, gt_tracks), auto,
        args.budget)
    payload = {"method": method, **result.to_json()}
    with open(args.out, "w") as fh:
        json.dump(payload, fh, indent=2)
        fh.write("\n")
    _say(args, f"mined {len(result.human_tracks)} human tracks "
               f"(budget {args.budget}), merged {len(result.merged)} "
               f"-> {args.out}")


def _named_paths(pairs, flag: str):
    out = []
    for pair in pairs or []:
        if "=" not in pair:
            raise ValidationError(f"{flag} expects name=path, got {pair!r}")
        name, path = pair.split("=", 1)
        out.append((name, path))
    return out


def cmd_report(args) -> None:
    if args.kind == "recall":
        paths = _report_recall(args)
    elif args.kind == "composition":
        paths = _report_composition(args)
    elif args.kind == "distribution":
        paths = _report_distribution(args)
    else:
        paths = _report_rarest(args)
    _say(args, "wrote " + ", ".join(paths))


def _report_recall(args):
    if not (args.corpus and args.model and args.pca):
        raise ValidationError("recall report needs --corpus, --model, --pca")
    reader = storage.CorpusReader(args.corpus)
    model = _load_model(args.model)
    transform = embed_mod.load_pca(args.pca)
    models = _parse_models(args.models)
    tracks = reader.gt_tracks()
    gt_rows = [(t, f, box) for t in tracks for f, box in t.boxes.items()]
    gt_rows.sort(key=lambda r: (r[0].segment_id, r[1], r[0].track_id))
    pooled = []
    for track, frame, box in gt_rows:
        fmap = reader.feature_map(track.segment_id)
        pooled.append(embed_mod.roi_max_pool(fmap, box, reader.geometry))
    x_norm = embed_mod.apply_embedding(transform, np.stack(pooled))
    rareness = flow_mod.rareness_data(model, x_norm)

    from collections import defaultdict
    dets_by_frame = defaultdict(list)
    for det in reader.detections():
        if models is not None and det.model_id not in models:
            continue
        if det.score >= args.score_threshold:
            dets_by_frame[(det.segment_id, det.frame_index)].append(det)
    matched = []
    from .geometry import bev_iou
    for track, frame, box in gt_rows:
        candidates = dets_by_frame.get((track.segment_id, frame), [])
        matched.append(any(bev_iou(det.box, box) >= args.match_iou
                           for det in candidates))
    rep = report.percentile_recall(rareness, matched)
    return report.write_recall_outputs(rep, args.out_prefix)


def _report_composition(args):
    pairs = _named_paths(args.mined, "--mined")
    if not pairs or not args.gt:
        raise ValidationError("composition report needs --mined and --gt")
    gt_tracks = mining.load_tracks_jsonl(args.gt)
    rows = []
    for name, path in pairs:
        result = mining.load_mined_json(path)
        rows.append(report.composition(result, gt_tracks, method=name))
    return report.write_composition_outputs(rows, args.out_prefix)


def _report_distribution(args):
    pairs = _named_paths(args.set, "--set")
    if not pairs or not args.model:
        raise ValidationError("distribution report needs --model and --set")
    model = _load_model(args.model)
    sets = {}
    for name, path in pairs:
        _, X = embed_mod.load_embeddings_csv(path)
        sets[name] = model.log_prob(X)
    rep = report.distribution_report(sets)
    return report.write_distribution_outputs(rep, args.out_prefix)


def _report_rarest(args):
    if not args.scores:
        raise ValidationError("rarest-tracks report needs --scores")
    rows = scoring.load_scores_jsonl(args.scores)
    per_track = {}
    for row in rows:
        if row.track_hypothesis_id is None:
            raise ValidationError(
                "scores file lacks track ids; rerun score with --detections")
        per_track.setdefault(row.track_hypothesis_id, []).append(row.score)
    track_rareness = {tid: scoring.track_score(vals)
                      for tid, vals in per_track.items()}
    entries = report.rarest_tracks(track_rareness, top_n=args.top)
    return report.write_rarest_outputs(entries, args.out_prefix)


# -- parser ---------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    # global flags accepted both before and after the subcommand; SUPPRESS
    # keeps an unset occurrence from clobbering the other position
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=argparse.SUPPRESS,
                        help="override the seed of seeded stages")
    common.add_argument("--config", default=argparse.SUPPRESS,
                        help="JSON config file (flat or keyed by subcommand)")
    common.add_argument("--quiet", action="store_true",
                        default=argparse.SUPPRESS,
                        help="suppress progress output")
    parser = argparse.ArgumentParser(
        prog="rem",
        description="Rare example mining over 3D-detection corpora",
        parents=[common])
    sub = parser.add_subparsers(dest="command", required=True)

    def add_parser(name, **kwargs):
        return sub.add_parser(name, parents=[common], **kwargs)

    p = add_parser("gen-corpus", help="generate a synthetic corpus")
    p.add_argument("--spec", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen_corpus)

    p = add_parser("embed", help="pool boxes and fit/apply PCA")
    p.add_argument("--corpus", required=True)
    p.add_argument("--k", type=int, default=10)
    p.add_argument("--pca-out", default="pca.json")
    p.add_argument("--pca-in", default=None,
                   help="reuse an existing transform instead of fitting")
    p.add_argument("--out", required=True)
    p.add_argument("--models", default="0",
                   help="comma-separated model ids or 'all'")
    p.add_argument("--boxes", choices=("predicted", "gt"), default="predicted")
    p.set_defaults(func=cmd_embed)

    p = add_parser("train-flow", help="fit the normalizing flow")
    p.add_argument("--embeddings", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--pca-ref", default=None)
    p.set_defaults(func=cmd_train_flow)

    p = add_parser("score", help="score candidates for mining")
    p.add_argument("--method", required=True, choices=scoring.METHODS)
    p.add_argument("--out", required=True)
    p.add_argument("--detections", default=None)
    p.add_argument("--model", default=None)
    p.add_argument("--embeddings", default=None)
    p.add_argument("--point-threshold", type=int, default=200)
    p.add_argument("--range-threshold", type=float, default=50.0)
    p.add_argument("--iou-threshold", type=float, default=0.3)
    p.add_argument("--ensemble-size", type=int, default=None)
    p.set_defaults(func=cmd_score)

    p = add_parser("mine", help="budgeted track-level mining")
    p.add_argument("--scores", required=True)
    p.add_argument("--budget", type=int, required=True)
    p.add_argument("--gt", required=True)
    p.add_argument("--auto", required=True)
    p.add_argument("--detections", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--keep-filtered", action="store_true",
                   help="keep hard-filtered md-rem candidates in the ranking")
    p.set_defaults(func=cmd_mine)

    p = add_parser("report", help="emit analysis reports and figures")
    p.add_argument("--kind", required=True,
                   choices=("recall", "composition", "distribution",
                            "rarest-tracks"))
    p.add_argument("--out-prefix", required=True)
    p.add_argument("--corpus", default=None)
    p.add_argument("--model", default=None)
    p.add_argument("--pca", default=None)
    p.add_argument("--models", default="0")
    p.add_argument("--match-iou", type=float, default=0.5)
    p.add_argument("--score-threshold", type=float, default=0.0)
    p.add_argument("--mined", action="append",
                   help="name=path of a mined.json (repeatable)")
    p.add_argument("--gt", default=None)
    p.add_argument("--set", action="append",
                   help="name=path of an embeddings csv (repeatable)")
    p.add_argument("--scores", default=None)
    p.add_argument("--top", type=int, default=20)
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    args.seed = getattr(args, "seed", None)
    args.config = getattr(args, "config", None)
    args.quiet = getattr(args, "quiet", False)
    try:
        args.func(args)
    except ValidationError as err:
        print(f"error: {err}", file=sys.stderr)
        return 2
    except NumericalError as err:
        print(f"numerical failure: {err}", file=sys.stderr)
        return 3
    except RemError as err:
        print(f"error: {err}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
