"""Command-line entry point: ``roomloc <command> [flags]``.

Exit codes: 0 success, 1 domain error (bad data, inconsistent inputs), 2 usage
error. Every artifact gets a manifest beside it recording the command, the
configuration, input hashes and the tool version; manifests carry no
timestamps or absolute paths so reruns are byte-identical.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from collections import defaultdict
from collections.abc import Sequence
from pathlib import Path

import numpy as np

from . import __version__
from .appearance import N_CLUSTERS, VladParams
from .core import (
    ObjectObservation,
    load_database,
    parse_observations,
    save_database,
    sha256_file,
    write_observations,
)
from .errors import DatabaseError, ParseError, RelocError, UsageError
from .evaluation import evaluate
from .geometry import GeometryConfig, GeometryNetParams, TrainConfig, train_geometry
from .relocalizer import RelocConfig, build_database, params_fingerprint, relocalize
from .synthworld import WorldSpec, generate_world, holdout_queries

log = logging.getLogger("roomloc")


class _Parser(argparse.ArgumentParser):
    def error(self, message: str):  # argparse exits 2 on its own; keep the text on stderr
        self.print_usage(sys.stderr)
        self.exit(2, f"{self.prog}: error: {message}\n")


def _manifest_path(out: Path) -> Path:
    return out.with_name(out.name + ".manifest.json")


def _write_manifest(path: Path, command: str, config: dict, inputs: dict, outputs: dict, seed) -> None:
    doc = {
        "command": command,
        "config": config,
        "inputs": {k: {"name": Path(p).name, "sha256": sha256_file(p)} for k, p in sorted(inputs.items())},
        "outputs": {Path(p).name: sha256_file(p) for p in outputs},
        "seed": seed,
        "version": __version__,
    }
    path.write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n")


def _load_vlad(path: str | None, seed: int, dp: int) -> VladParams:
    """Weights from a file, else seeded ones sized to the data (``dp`` = descriptor dim)."""
    return _on_data(VladParams.load, path) if path else VladParams.seeded(seed, Dp=dp)


def _load_geom(path: str | None) -> GeometryNetParams | None:
    return _on_data(GeometryNetParams.load, path) if path else None


def _group_by_image(observations: Sequence[ObjectObservation]) -> dict[str, list[ObjectObservation]]:
    groups: dict[str, list[ObjectObservation]] = defaultdict(list)
    for o in observations:
        groups[o.image_id].append(o)
    return dict(groups)


def _read_labels(path: str) -> dict[str, str]:
    labels = {}
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    if not rows or rows[0] != ["query_image_id", "true_room"]:
        raise ParseError("labels file must start with 'query_image_id,true_room'", 1)
    for lineno, row in enumerate(rows[1:], start=2):
        if not row:
            continue
        if len(row) != 2:
            raise ParseError(f"expected 2 fields, got {len(row)}", lineno)
        if row[0] in labels:
            raise ParseError(f"duplicate query image {row[0]!r}", lineno)
        labels[row[0]] = row[1]
    return labels


def _on_data(fn, *args, **kwargs):
    """Run a processing step; a violated precondition there is a data problem (exit 1)."""
    try:
        return fn(*args, **kwargs)
    except UsageError as exc:
        raise DatabaseError(str(exc)) from None


# ---------------------------------------------------------------------------
# commands


def cmd_gen_synth(args) -> int:
    spec = WorldSpec(
        n_rooms=args.rooms,
        objects_per_room=(args.objects_min, args.objects_max),
        images_per_room=args.images,
        keypoints_per_object=(args.keypoints_min, args.keypoints_max),
        descriptor_noise_sigma=args.noise,
        layout_jitter_sigma=args.jitter,
        twin_room_pairs=args.twins,
        seed=args.seed,
        descriptor_dim=args.dp,
    )
    if spec.images_per_room < 2:
        raise UsageError("--images must be >= 2 to hold out queries")
    world = generate_world(spec)
    rest, queries = holdout_queries(world, args.holdout, args.seed)

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    files = {
        "observations": out / "observations.jsonl",
        "db": out / "db.jsonl",
        "queries": out / "queries.jsonl",
        "labels": out / "labels.csv",
    }
    write_observations(files["observations"], world.observations)
    write_observations(
        files["db"], [o for images in rest.values() for iid in sorted(images) for o in images[iid]]
    )
    # query records are anonymous (no room, neutral ids): the labels file is the only ground truth
    query_ids = [f"q{n:05d}" for n in range(len(queries))]
    write_observations(
        files["queries"],
        [
            ObjectObservation(o.scene_id, "", qid, o.object_id.rsplit("-", 1)[-1], o.keypoints)
            for qid, q in zip(query_ids, queries)
            for o in q.observations
        ],
    )
    with open(files["labels"], "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["query_image_id", "true_room"])
        for qid, q in zip(query_ids, queries):
            w.writerow([qid, q.true_room])
    config = {
        "rooms": args.rooms,
        "objects": [args.objects_min, args.objects_max],
        "images": args.images,
        "keypoints": [args.keypoints_min, args.keypoints_max],
        "noise": args.noise,
        "jitter": args.jitter,
        "twins": args.twins,
        "dp": args.dp,
        "holdout": args.holdout,
        "twin_rooms": sorted(world.twin_rooms()),
    }
    _write_manifest(out / "manifest.json", "gen-synth", config, {}, files.values(), args.seed)
    print(f"wrote {len(world.observations)} observations, {len(queries)} queries to {out}")
    return 0


def cmd_init_vlad(args) -> int:
    params = VladParams.seeded(args.seed, C=args.clusters, Dp=args.dp)
    out = Path(args.out)
    params.save(out)
    _write_manifest(
        _manifest_path(out), "init-vlad", {"clusters": args.clusters, "dp": args.dp}, {}, [out], args.seed
    )
    return 0


def cmd_build_db(args) -> int:
    observations = parse_observations(args.obs)
    if not observations:
        raise ParseError(f"{args.obs} holds no observations")
    vlad = _load_vlad(args.vlad, args.seed, observations[0].keypoints.dim)
    geom = _load_geom(args.geom)
    db = _on_data(build_database, observations, args.k, vlad, geom, seed=args.seed)
    out = Path(args.out)
    save_database(db, out)
    inputs = {"obs": args.obs}
    if args.vlad:
        inputs["vlad"] = args.vlad
    if args.geom:
        inputs["geom"] = args.geom
    config = {"k": args.k, "vlad": "file" if args.vlad else "seeded", "geometry": geom is not None}
    _write_manifest(_manifest_path(out), "build-db", config, inputs, [out], args.seed)
    print(f"database: {len(db.rooms)} rooms, K={db.K}")
    return 0


def _open_model(args) -> tuple:
    db = _on_data(load_database, args.db)
    code_dim = next((o.embedding.dim for r in db.rooms for o in r.objects.values()), N_CLUSTERS)
    vlad = _load_vlad(args.vlad, args.seed, max(1, code_dim // N_CLUSTERS))
    geom = _load_geom(args.geom)
    if db.fingerprint and db.fingerprint != params_fingerprint(vlad, geom):
        raise DatabaseError(
            f"{args.db} was built with different weights than given (seed {args.seed}, "
            f"vlad={'file' if args.vlad else 'seeded'}, geom={'file' if args.geom else 'none'})"
        )
    return db, vlad, geom


def cmd_query(args) -> int:
    db, vlad, geom = _open_model(args)
    cfg = RelocConfig(w=args.w, t_diff=args.tdiff, K=db.K)
    groups = _group_by_image(parse_observations(args.query_obs))
    if not groups:
        raise ParseError("query file holds no observations")
    # all images in the file form one query
    result = _on_data(relocalize, [o for g in groups.values() for o in g], db, vlad, geom, cfg)
    print(result.to_record())
    return 0


def cmd_eval(args) -> int:
    db, vlad, geom = _open_model(args)
    cfg = RelocConfig(w=args.w, t_diff=args.tdiff, K=db.K)
    groups = _group_by_image(parse_observations(args.queries))
    labels = _read_labels(args.labels)
    missing = sorted(set(groups) - set(labels))
    if missing:
        raise DatabaseError(f"{len(missing)} query images have no label, e.g. {missing[0]!r}")
    queries = [(groups[iid], labels[iid]) for iid in sorted(groups)]
    thresholds = np.linspace(0.0, 1.0, args.thresholds).round(10).tolist()
    report = _on_data(evaluate, db, queries, vlad, geom, cfg, thresholds, jobs=args.jobs)

    out = Path(args.out)
    out.write_text(report.dumps())
    outputs = [out]
    # wall-clock numbers vary run to run; keep them out of the report itself
    timing = out.with_name(out.name + ".timing.json")
    timing.write_text(json.dumps({"jobs": args.jobs, "latency_ms": report.latency_ms}, indent=1) + "\n")
    if args.pr_table:
        Path(args.pr_table).write_text(report.pr_table())
        outputs.append(Path(args.pr_table))
    inputs = {"db": args.db, "queries": args.queries, "labels": args.labels}
    if args.vlad:
        inputs["vlad"] = args.vlad
    if args.geom:
        inputs["geom"] = args.geom
    config = {"w": args.w, "tdiff": args.tdiff, "thresholds": args.thresholds, "jobs": args.jobs}
    _write_manifest(_manifest_path(out), "eval", config, inputs, outputs, args.seed)
    print(
        f"accuracy {report.accuracy:.4f}  auc {report.auc:.4f}  best_f1 {report.best_f1:.4f}  "
        f"geometry {report.geometry_fraction:.2f}  ({report.n_queries} queries)"
    )
    return 0


def cmd_train_geom(args) -> int:
    net = GeometryConfig(
        embed_dim=args.embed_dim,
        hidden_dim=args.hidden_dim,
        out_dim=args.out_dim,
        heads=args.heads,
        dropout=args.dropout,
    )
    cfg = TrainConfig(
        lr=args.lr,
        batch_size=args.batch_size,
        epochs=args.epochs,
        seed=args.seed,
        steps_per_epoch=args.steps_per_epoch,
    )
    observations = parse_observations(args.train_obs)
    result = _on_data(train_geometry, observations, cfg, net_config=net)
    out = Path(args.out)
    result.params.save(out)
    loss_log = Path(args.loss_log) if args.loss_log else out.with_name(out.name + ".loss.csv")
    loss_log.write_text("".join(f"{i},{v!r}\n" for i, v in enumerate(result.epoch_losses, start=1)))
    config = {
        "epochs": args.epochs,
        "lr": args.lr,
        "batch_size": args.batch_size,
        "steps_per_epoch": args.steps_per_epoch,
        "net": {
            "embed_dim": net.embed_dim,
            "hidden_dim": net.hidden_dim,
            "out_dim": net.out_dim,
            "heads": net.heads,
            "dropout": net.dropout,
        },
    }
    _write_manifest(
        _manifest_path(out), "train-geom", config, {"train_obs": args.train_obs}, [out, loss_log], args.seed
    )
    print(f"epoch 1 loss {result.epoch_losses[0]:.4f} -> epoch {cfg.epochs} loss {result.epoch_losses[-1]:.4f}")
    return 0


# ---------------------------------------------------------------------------
# parser


def _positive(kind):
    def parse(text: str):
        v = kind(text)
        if v < 1:
            raise argparse.ArgumentTypeError(f"must be >= 1, got {text}")
        return v

    return parse


def _nonneg(text: str) -> float:
    v = float(text)
    if not v >= 0:
        raise argparse.ArgumentTypeError(f"must be >= 0, got {text}")
    return v


def _unit_interval(text: str) -> float:
    v = float(text)
    if not 0.0 <= v <= 1.0:
        raise argparse.ArgumentTypeError(f"must be in [0, 1], got {text}")
    return v


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="roomloc", description="Object-based room-level relocalization.")
    p.add_argument("--version", action="version", version=f"roomloc {__version__}")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)
    pint = _positive(int)

    g = sub.add_parser("gen-synth", help="generate a seeded synthetic world")
    g.add_argument("--rooms", type=int, default=20)
    g.add_argument("--objects-min", type=int, default=5)
    g.add_argument("--objects-max", type=int, default=10)
    g.add_argument("--images", type=int, default=20, help="images per room")
    g.add_argument("--keypoints-min", type=int, default=8)
    g.add_argument("--keypoints-max", type=int, default=16)
    g.add_argument("--noise", type=float, default=0.2, help="descriptor noise sigma")
    g.add_argument("--jitter", type=float, default=0.02, help="layout jitter sigma (image fraction)")
    g.add_argument("--twins", type=int, default=0, help="twin room pairs")
    g.add_argument("--dp", type=int, default=256, help="descriptor dimension")
    g.add_argument("--holdout", type=float, default=0.5, help="fraction of images held out as queries")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", required=True, help="output directory")
    g.set_defaults(func=cmd_gen_synth)

    v = sub.add_parser("init-vlad", help="write seeded appearance weights")
    v.add_argument("--clusters", type=pint, default=N_CLUSTERS)
    v.add_argument("--dp", type=pint, default=256)
    v.add_argument("--seed", type=int, default=0)
    v.add_argument("--out", required=True)
    v.set_defaults(func=cmd_init_vlad)

    b = sub.add_parser("build-db", help="build a room database from observations")
    b.add_argument("--obs", required=True)
    b.add_argument("--k", type=pint, default=1, help="images per room")
    b.add_argument("--vlad", help="appearance weights (default: seeded by --seed)")
    b.add_argument("--geom", help="geometry weights (default: no geometry)")
    b.add_argument("--seed", type=int, default=0)
    b.add_argument("--out", required=True)
    b.set_defaults(func=cmd_build_db)

    def model_flags(sp):
        sp.add_argument("--db", required=True)
        sp.add_argument("--w", type=_nonneg, default=10.0, help="appearance weight in the ensemble")
        sp.add_argument("--tdiff", type=_unit_interval, default=0.1, help="appearance gap gate")
        sp.add_argument("--vlad")
        sp.add_argument("--geom")
        sp.add_argument("--seed", type=int, default=0, help="seed of the default appearance weights")

    q = sub.add_parser("query", help="rank rooms for one query")
    model_flags(q)
    q.add_argument("--query-obs", required=True)
    q.set_defaults(func=cmd_query)

    e = sub.add_parser("eval", help="evaluate a labelled query set")
    model_flags(e)
    e.add_argument("--queries", required=True)
    e.add_argument("--labels", required=True)
    e.add_argument("--thresholds", type=_positive(int), default=101, help="number of rho values in [0, 1]")
    e.add_argument("--jobs", type=pint, default=1, help="parallel queries (timings need 1)")
    e.add_argument("--pr-table", help="also write the PR sweep as CSV")
    e.add_argument("--out", required=True)
    e.set_defaults(func=cmd_eval)

    t = sub.add_parser("train-geom", help="train the geometry network")
    t.add_argument("--train-obs", required=True)
    t.add_argument("--epochs", type=pint, default=30)
    t.add_argument("--lr", type=_nonneg, default=1e-4)
    t.add_argument("--batch-size", type=pint, default=256)
    t.add_argument("--steps-per-epoch", type=pint)
    t.add_argument("--embed-dim", type=pint, default=256)
    t.add_argument("--hidden-dim", type=pint, default=512)
    t.add_argument("--out-dim", type=pint, default=1024)
    t.add_argument("--heads", type=pint, default=8)
    t.add_argument("--dropout", type=_unit_interval, default=0.5)
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--loss-log", help="epoch,loss lines (default: <out>.loss.csv)")
    t.add_argument("--out", required=True)
    t.set_defaults(func=cmd_train_geom)
    return p


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    logging.captureWarnings(True)
    try:
        return args.func(args)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"roomloc {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except (RelocError, OSError) as exc:
        print(f"roomloc {args.command}: {exc}", file=sys.stderr)
        return 1
    finally:
        logging.captureWarnings(False)


if __name__ == "__main__":
    sys.exit(main())
