"""``aspectkg`` command line: one binary, one subcommand per pipeline stage.

Exit codes: 0 success, 1 usage error, 2 data/validation error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import datetime as _dt
import hashlib
import json
import logging
import os
import sys
from dataclasses import asdict, fields
from pathlib import Path

from . import __version__
from .air import (
    AirTrainConfig,
    DatasetSplit,
    NumericError,
    ProjectionModel,
    ThresholdPolicy,
    TopMPolicy,
    air_image_scorer,
    build_triples,
    correct_kg,
    expand_assign,
    expand_kg,
    read_triples,
    split_triples,
    train,
    write_triples,
)
from .encoders import WordEmbeddingTable, parse_provider
from .features import (
    FEATURE_NAMES,
    IMAGE_INDEX,
    assemble_feature_rows,
    kg_image_scorer,
    parse_feature_indices,
)
from .ingest import (
    FixtureSearchClient,
    extract_aspects,
    extract_query_sentences,
    harvest_search_images,
    harvest_wikipedia_images,
    load_page,
    select_top_entities,
)
from .kg import AspectKG, DataError, EntityRecord, ImageRef, compute_stats, flatten_to_first_level, load_kg, save_kg
from .ltr import LinearModel, TrainConfig, coordinate_ascent_train, project_features, read_run_file, write_run_file
from .metrics import eval_air, eval_eal
from .synthetic import read_eal_queries

log = logging.getLogger("aspectkg")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3
MANIFEST = "manifest.json"


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


# -- manifests --------------------------------------------------------------------

def digest_path(path) -> str:
    """sha256 over a file, or over the sorted relative paths and bytes of a directory.

    Manifests inside a directory are skipped: they carry a timestamp and describe the
    data rather than being part of it.
    """
    path = Path(path)
    h = hashlib.sha256()
    if path.is_dir():
        for p in sorted(q for q in path.rglob("*") if q.is_file() and q.name != MANIFEST):
            h.update(p.relative_to(path).as_posix().encode("utf-8") + b"\x00")
            h.update(p.read_bytes())
            h.update(b"\x00")
    else:
        h.update(path.read_bytes())
    return h.hexdigest()


def _canonical(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), default=str)


def write_manifest(out_dir, command: str, argv, config: dict, seeds, inputs: dict, metrics: dict | None = None):
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest = {
        "command": command,
        "argv": list(argv),
        "config_digest": hashlib.sha256(_canonical(config).encode("utf-8")).hexdigest(),
        "config": config,
        "seeds": list(seeds),
        "inputs": {k: digest_path(v) for k, v in sorted(inputs.items()) if v is not None and Path(v).exists()},
        "metrics": metrics or {},
        "tool_version": __version__,
        "timestamp": _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds"),
    }
    (out_dir / MANIFEST).write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return manifest


# -- config -------------------------------------------------------------------------

def _load_config(args) -> dict:
    if not getattr(args, "config", None):
        return {}
    try:
        return json.loads(Path(args.config).read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise UsageError(f"config file not found: {args.config}") from None
    except json.JSONDecodeError as exc:
        raise DataError(f"{args.config}: invalid JSON ({exc.msg})") from None


def _dataclass_from(cls, section: dict, **overrides):
    known = {f.name for f in fields(cls)}
    unknown = set(section) - known
    if unknown:
        raise UsageError(f"unknown {cls.__name__} keys: {sorted(unknown)}")
    values = {**section, **{k: v for k, v in overrides.items() if v is not None}}
    try:
        return cls(**values)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"bad {cls.__name__}: {exc}") from None


def _provider(args):
    spec = args.embeddings
    if not spec:
        raise UsageError("--embeddings is required (a .jsonl file or mock:SEED:DIM)")
    try:
        return parse_provider(spec)
    except FileNotFoundError:
        raise UsageError(f"embeddings file not found: {spec}") from None
    except ValueError as exc:
        raise DataError(str(exc)) from None


def _need(path, what):
    if path is None:
        raise UsageError(f"{what} is required")
    if not Path(path).exists():
        raise UsageError(f"{what} not found: {path}")
    return Path(path)


def _ks(spec) -> tuple[int, ...]:
    try:
        ks = tuple(int(x) for x in str(spec).split(",") if x.strip())
    except ValueError:
        raise UsageError(f"bad --k {spec!r}") from None
    if not ks or any(k < 1 for k in ks):
        raise UsageError("--k needs positive integers")
    return ks


def _out(args) -> Path:
    if not args.out:
        raise UsageError("--out is required")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _read_entities(path) -> list[EntityRecord]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                out.append(EntityRecord(**json.loads(line)))
            except (TypeError, json.JSONDecodeError) as exc:
                raise DataError(f"{Path(path).name}:{lineno}: bad entity record ({exc})") from None
    return out


# -- subcommands ---------------------------------------------------------------------

def cmd_build(args, argv):
    pages_dir = _need(args.pages, "--pages")
    entities_path = _need(args.entities, "--entities")
    out = _out(args)
    fixtures = args.fixtures or os.environ.get("ASPECTKG_FIXTURES")
    candidates = _read_entities(entities_path)
    selected = {e.id: e for e in select_top_entities(candidates, args.n_per_type)}
    pages = {}
    for p in sorted(pages_dir.iterdir()):
        if p.suffix.lower() in (".json", ".html", ".htm"):
            page = load_page(p)
            if page.entity_id in selected:
                pages[page.entity_id] = page
    aspects, links, images = [], [], {}
    queries = []
    for eid in sorted(pages):
        page = pages[eid]
        aspects.extend(extract_aspects(page))
        links.extend(harvest_wikipedia_images(page))
        for s in page.walk():
            for im in s.images:
                images.setdefault(im.image_id, im)
        queries.extend(extract_query_sentences(page, selected[eid]))
    report = {"n_pages": len(pages), "n_query_sentences": len(queries)}
    if fixtures:
        harvest = harvest_search_images(queries, FixtureSearchClient(fixtures), k=args.k)
        links.extend(harvest.links)
        for im in harvest.images:
            images.setdefault(im.image_id, im)
        report["search"] = harvest.report()
    else:
        report["search"] = None
    keep = {ln.key(): ln for ln in links}
    kg = AspectKG.build([selected[e] for e in sorted(pages)], aspects, images.values(), keep.values())
    save_kg(kg, out / "kg")
    (out / "run_report.json").write_text(json.dumps(report, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    stats = compute_stats(kg)
    write_manifest(out, "build", argv, {"n_per_type": args.n_per_type, "k": args.k}, [],
                   {"pages": pages_dir, "entities": entities_path, "fixtures": fixtures}, stats)
    print(json.dumps(stats, sort_keys=True))


def cmd_flatten(args, argv):
    kg_dir = _need(args.kg, "--kg")
    out = _out(args)
    flat = flatten_to_first_level(load_kg(kg_dir))
    save_kg(flat, out / "kg")
    write_manifest(out, "flatten", argv, {}, [], {"kg": kg_dir}, compute_stats(flat))


def cmd_stats(args, argv):
    kg_dir = _need(args.kg, "--kg")
    stats = compute_stats(load_kg(kg_dir))
    print(json.dumps(stats, indent=2, sort_keys=True))
    if args.out:
        out = _out(args)
        (out / "stats.json").write_text(json.dumps(stats, indent=2, sort_keys=True) + "\n", encoding="utf-8")
        write_manifest(out, "stats", argv, {}, [], {"kg": kg_dir}, stats)


def _image_scorer(args, kg, provider, features):
    if IMAGE_INDEX not in features:
        return None
    if kg is None:
        raise UsageError("the image feature needs --kg")
    if args.air_model:
        return air_image_scorer(kg, ProjectionModel.load(args.air_model), provider)
    return kg_image_scorer(kg, provider)


def cmd_features(args, argv):
    data = _need(args.input, "--input")
    out = _out(args)
    features = parse_feature_indices(args.features)
    kg = load_kg(args.kg) if args.kg else None
    provider = _provider(args) if IMAGE_INDEX in features else None
    table = None
    if {2, 6} & set(features):
        table = WordEmbeddingTable.load(_need(args.word_vectors, "--word-vectors"))
    scorer = _image_scorer(args, kg, provider, features)
    lists = [
        assemble_feature_rows(q.context, q.candidates, q.gold, q.query_id, features, table, scorer)
        for q in read_eal_queries(data)
    ]
    write_run_file(out / "features.run", lists)
    names = [FEATURE_NAMES[i] for i in features]
    (out / "features.json").write_text(json.dumps({"features": names}, indent=2) + "\n", encoding="utf-8")
    write_manifest(out, "features", argv, {"features": names}, [],
                   {"input": data, "kg": args.kg, "embeddings": args.embeddings, "word_vectors": args.word_vectors,
                    "air_model": args.air_model},
                   {"n_queries": len(lists)})


def _run_feature_names(run_path, n):
    meta = Path(run_path).with_name("features.json")
    if meta.exists():
        names = json.loads(meta.read_text(encoding="utf-8"))["features"]
        if len(names) == n:
            return names
    return [f"f{i}" for i in range(n)]


def cmd_ltr_train(args, argv):
    data = _need(args.input, "--input")
    out = _out(args)
    cfg = _dataclass_from(TrainConfig, _load_config(args).get("ltr", {}), seed=args.seed)
    lists = read_run_file(data)
    if not lists:
        raise DataError(f"{data}: no query lists")
    names = _run_feature_names(data, lists[0].n_features)
    if args.features:
        idx = [int(x) for x in args.features.split(",")]
        if any(not 0 <= i < len(names) for i in idx):
            raise UsageError("--features index outside the run file's columns")
        lists = project_features(lists, idx)
        names = [names[i] for i in idx]
    res = coordinate_ascent_train(lists, cfg)
    model = LinearModel(res.weights, res.norm, tuple(names), cfg.digest(), res.train_map)
    model.save(out / "model.json")
    write_manifest(out, "ltr-train", argv, asdict(cfg), [cfg.seed], {"input": data},
                   {"train_map": res.train_map, "restart": res.restart, "epochs": res.epochs})
    print(json.dumps({"train_map": res.train_map}))


def cmd_ltr_eval(args, argv):
    data = _need(args.input, "--input")
    model_path = _need(args.model, "--model")
    out = _out(args)
    model = LinearModel.load(model_path)
    lists = read_run_file(data)
    names = _run_feature_names(data, lists[0].n_features if lists else 0)
    if args.features:
        lists = project_features(lists, [int(x) for x in args.features.split(",")])
    elif list(model.feature_order) != names and all(n in names for n in model.feature_order):
        lists = project_features(lists, [names.index(n) for n in model.feature_order])
    report = eval_eal(model, lists)
    report.write(out, per_query=not args.aggregate_only)
    write_manifest(out, "ltr-eval", argv, {}, [], {"input": data, "model": model_path}, report.to_dict())
    print(json.dumps(report.to_dict(), sort_keys=True))


def cmd_air_triples(args, argv):
    kg_dir = _need(args.kg, "--kg")
    out = _out(args)
    seed = args.seed if args.seed is not None else 0
    kg = load_kg(kg_dir)
    provider = _provider(args)
    triples = build_triples(kg, provider)
    split = split_triples(triples, seed)
    write_triples(out / "triples.jsonl", triples)
    for name in ("train", "validation", "test"):
        write_triples(out / f"{name}.jsonl", getattr(split, name))
    counts = {"n_triples": len(triples), "train": len(split.train), "validation": len(split.validation),
              "test": len(split.test)}
    write_manifest(out, "air-triples", argv, {"seed": seed}, [seed], {"kg": kg_dir, "embeddings": args.embeddings},
                   counts)
    print(json.dumps(counts, sort_keys=True))


def _read_split(directory) -> DatasetSplit:
    directory = _need(directory, "--triples")
    parts = {}
    for name in ("train", "validation", "test"):
        p = directory / f"{name}.jsonl"
        parts[name] = read_triples(p) if p.exists() else []
    return DatasetSplit(**parts)


def cmd_air_train(args, argv):
    out = _out(args)
    split = _read_split(args.triples)
    provider = _provider(args)
    cfg = _dataclass_from(AirTrainConfig, _load_config(args).get("air", {}), seed=args.seed)
    init = ProjectionModel.initial(provider.image_dim, provider.text_dim, cfg.tau, seed=cfg.seed)
    outcome = train(init, split, provider, cfg)
    outcome.model.save(out / "air_model.json", cfg.digest())
    curve = {"initial_loss": outcome.initial_loss, "train_loss": outcome.loss_curve,
             "validation_loss": outcome.val_curve}
    (out / "loss_curve.json").write_text(json.dumps(curve, indent=2) + "\n", encoding="utf-8")
    write_manifest(out, "air-train", argv, asdict(cfg), [cfg.seed],
                   {"triples": args.triples, "embeddings": args.embeddings},
                   {"final_train_loss": outcome.loss_curve[-1] if outcome.loss_curve else None})


def cmd_air_eval(args, argv):
    out = _out(args)
    split = _read_split(args.triples)
    provider = _provider(args)
    ks = _ks(args.k)
    kg = load_kg(args.kg) if args.kg else None
    model = ProjectionModel.load(_need(args.model, "--model"))
    air = eval_air(model, split.test, provider, ks, kg=kg)
    base = eval_air(None, split.test, provider, ks, kg=kg)
    air.write(out, "report", per_query=not args.aggregate_only)
    base.write(out, "baseline", per_query=not args.aggregate_only)
    metrics = {"air": air.to_dict(), "baseline": base.to_dict()}
    write_manifest(out, "air-eval", argv, {"k": list(ks)}, [],
                   {"triples": args.triples, "embeddings": args.embeddings, "model": args.model, "kg": args.kg},
                   metrics)
    print(json.dumps(metrics, sort_keys=True))


def _policy(args):
    if (args.threshold is None) == (args.keep_top is None):
        raise UsageError("give exactly one of --threshold or --keep-top")
    if args.threshold is not None:
        return ThresholdPolicy(args.threshold)
    return TopMPolicy(args.keep_top)


def cmd_kg_correct(args, argv):
    kg_dir = _need(args.kg, "--kg")
    out = _out(args)
    policy = _policy(args)
    provider = _provider(args)
    model = ProjectionModel.load(_need(args.model, "--model"))
    kg2, removed = correct_kg(load_kg(kg_dir), model, provider, policy)
    save_kg(kg2, out / "kg")
    with open(out / "removed.jsonl", "w", encoding="utf-8", newline="\n") as fh:
        for ln, score in removed:
            fh.write(json.dumps({"entity_id": ln.entity_id, "aspect_path": list(ln.aspect_path),
                                 "image_id": ln.image_id, "score": score}, sort_keys=True) + "\n")
    write_manifest(out, "kg-correct", argv, asdict(policy), [],
                   {"kg": kg_dir, "model": args.model, "embeddings": args.embeddings}, {"n_removed": len(removed)})


def cmd_kg_expand(args, argv):
    kg_dir = _need(args.kg, "--kg")
    images_path = _need(args.images, "--images")
    out = _out(args)
    provider = _provider(args)
    model = ProjectionModel.load(_need(args.model, "--model"))
    kg = load_kg(kg_dir)
    assignments, refs = [], []
    with open(out / "assignments.jsonl", "w", encoding="utf-8", newline="\n") as fh:
        for lineno, line in enumerate(images_path.read_text(encoding="utf-8").splitlines(), 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                eid, iid = rec["entity_id"], rec["image_id"]
            except (KeyError, json.JSONDecodeError):
                raise DataError(f"{images_path.name}:{lineno}: expected {{entity_id, image_id}}") from None
            label, score = expand_assign(iid, eid, kg, model, provider)
            assignments.append((eid, label, iid))
            refs.append(ImageRef(iid, rec.get("locator", f"expand:{iid}"), "wikipedia"))
            fh.write(json.dumps({"entity_id": eid, "image_id": iid, "aspect_label": label, "score": score},
                                sort_keys=True) + "\n")
    save_kg(expand_kg(kg, assignments, refs), out / "kg")
    write_manifest(out, "kg-expand", argv, {}, [],
                   {"kg": kg_dir, "images": images_path, "model": args.model, "embeddings": args.embeddings},
                   {"n_assigned": len(assignments)})


COMMANDS = {
    "build": cmd_build,
    "flatten": cmd_flatten,
    "stats": cmd_stats,
    "features": cmd_features,
    "ltr-train": cmd_ltr_train,
    "ltr-eval": cmd_ltr_eval,
    "air-triples": cmd_air_triples,
    "air-train": cmd_air_train,
    "air-eval": cmd_air_eval,
    "kg-correct": cmd_kg_correct,
    "kg-expand": cmd_kg_expand,
}


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="aspectkg", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)

    def add(name, help_, *opts):
        p = sub.add_parser(name, help=help_)
        p.add_argument("--out", help="output directory")
        p.add_argument("--config", help="JSON config with 'ltr' / 'air' sections")
        p.add_argument("--seed", type=int)
        for o in opts:
            o(p)
        return p

    kg = lambda p: p.add_argument("--kg", help="KG directory")
    emb = lambda p: p.add_argument("--embeddings", help="embeddings .jsonl or mock:SEED:DIM")
    inp = lambda p: p.add_argument("--input", help="input file")
    feats = lambda p: p.add_argument("--features", help="feature index list, e.g. 0,3,7")
    model = lambda p: p.add_argument("--model", help="model file")
    kcut = lambda p: p.add_argument("--k", default="3,5,10", help="metric cutoffs")
    agg = lambda p: p.add_argument("--aggregate-only", action="store_true", help="skip per-query TSV")
    triples = lambda p: p.add_argument("--triples", help="directory with train/validation/test.jsonl")

    def build_opts(p):
        p.add_argument("--pages", help="directory of PageDoc .json or .html files")
        p.add_argument("--entities", help="candidate entities .jsonl")
        p.add_argument("--fixtures", help="search fixture directory (default: $ASPECTKG_FIXTURES)")
        p.add_argument("--n-per-type", type=int, default=200)
        p.add_argument("--k", type=int, default=5, help="search results kept per query")

    def features_opts(p):
        p.add_argument("--word-vectors", help="word vectors (.jsonl or word2vec text)")
        p.add_argument("--air-model", help="select aspect images with a trained AIR model")

    def correct_opts(p):
        p.add_argument("--threshold", type=float)
        p.add_argument("--keep-top", type=int)

    add("build", "page documents -> KG", build_opts)
    add("flatten", "move links to first-level aspects", kg)
    add("stats", "KG statistics", kg)
    add("features", "EAL feature rows (run-file format)", inp, kg, emb, feats, features_opts)
    add("ltr-train", "coordinate-ascent ranker", inp, feats)
    add("ltr-eval", "MAP of a ranker", inp, model, feats, agg)
    add("air-triples", "build and split AIR triples", kg, emb)
    add("air-train", "train the AIR projection", triples, emb)
    add("air-eval", "Recall@k of AIR and the text baseline", triples, emb, model, kcut, kg, agg)
    add("kg-correct", "remove low-scoring aspect images", kg, emb, model, correct_opts)
    add("kg-expand", "assign new images to aspects", kg, emb, model,
        lambda p: p.add_argument("--images", help=".jsonl of {entity_id, image_id}"))
    return parser


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    if not args.command:
        parser.print_usage(sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        COMMANDS[args.command](args, argv)
    except UsageError as exc:
        print(f"aspectkg {args.command}: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (NumericError, FloatingPointError) as exc:
        print(f"aspectkg {args.command}: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (DataError, KeyError, ValueError) as exc:
        print(f"aspectkg {args.command}: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except OSError as exc:
        print(f"aspectkg {args.command}: I/O error: {exc}", file=sys.stderr)
        return EXIT_DATA
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
