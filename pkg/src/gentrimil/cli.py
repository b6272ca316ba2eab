"""Command-line pipeline: ``gentrimil <stage> --config cfg.json``.

Stages read their inputs from the work directory and write only their own
sub-directory::

    data/    synth | ingest      pairs.jsonl, containers.jsonl, tracts.geojson, labels.csv
    step1/   train-step1         encoder.bin, train_log.csv, metrics.json
    embed/   embed               embeddings.bin, embeddings_reference.bin
    step2/   train-step2         attention_<mode>.bin, log_<mode>.csv
    eval/    eval                metrics.json, table.txt, predictions_<mode>.json
    analyze/ analyze             curves.csv, curves.png, summary.json, extremes.json, attention.csv
    map/     map                 discrepancy.geojson
    fetch/   fetch               archive.jsonl (manifest)

Exit status: 0 success, 1 validation error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import copy
import json
import logging
import sys
from dataclasses import asdict, fields
from datetime import date
from pathlib import Path

import numpy as np

from . import analysis, evaluation, geodata, ingest, mil
from .encoder import (
    EmbeddingCache, EncoderParams, Step1Config, embed_dataset, init_encoder,
    train_change_detector, write_training_log,
)
from .images import FileLoader
from .synthcity import SynthConfig, gen_city, write_city

log = logging.getLogger("gentrimil")

DEFAULTS = {
    "eval_city": "Synthetic",
    "paths": {"work_dir": "work", "archive": None, "permits": None, "businesses": None,
              "tracts": None, "labels": None, "roads": None, "cpi": None, "naics_mapping": None},
    "encoder": {"d": 64, "depth": 4, "base_channels": 8, "image_side": 64, "epochs": 50,
                "lr": 1e-3, "batch": 32, "seed": 0},
    "mil": {"W": 128, "mode": "full", "epochs": 150, "lr": 1e-3, "batch": 8, "seed": 0,
            "class_weighting": True},
    "ingest": {"spacing_m": 75.0, "radius_m": 15.0, "min_value": 60000.0, "base_year": 2020,
               "k_min": 100, "k_max": 200, "seed": 0},
    "split": {"ratio": 0.7, "seed": 0},
    "synth": {},
    "fetch": {"base_url": None, "api_key_env": "STREETVIEW_API_KEY", "rate_limit": 10.0,
              "start": "2007-01-01", "end": "2022-12-31"},
    "analysis": {"k": 20, "top_k": 10, "plot": "curves.png"},
}


class UsageError(Exception):
    """Bad configuration or a missing upstream artifact (exit status 1)."""


def _merge(base: dict, over: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = v
    return out


def load_config(args) -> dict:
    cfg = copy.deepcopy(DEFAULTS)
    if args.config:
        path = Path(args.config)
        if not path.exists():
            raise UsageError(f"config file {path} does not exist")
        cfg = _merge(cfg, json.loads(path.read_text()))
        base = path.parent
        for k, v in cfg["paths"].items():
            if v and k != "work_dir" and not Path(v).is_absolute():
                cfg["paths"][k] = str(base / v)
    if args.work_dir:
        cfg["paths"]["work_dir"] = args.work_dir
    if args.seed is not None:
        for section in ("encoder", "mil", "split", "ingest"):
            cfg[section]["seed"] = args.seed
        cfg["synth"]["seed"] = args.seed
    if args.mode:
        cfg["mil"]["mode"] = args.mode
    return cfg


class Workspace:
    def __init__(self, cfg: dict):
        self.cfg = cfg
        self.root = Path(cfg["paths"]["work_dir"])

    def dir(self, name: str) -> Path:
        d = self.root / name
        d.mkdir(parents=True, exist_ok=True)
        return d

    def need(self, rel: str, producer: str) -> Path:
        p = self.root / rel
        if not p.exists():
            raise UsageError(f"missing {p}; run {producer} first")
        return p

    def input_path(self, key: str) -> Path:
        v = self.cfg["paths"].get(key)
        if not v:
            raise UsageError(f"config paths.{key} is required for this stage")
        p = Path(v)
        if not p.exists():
            raise UsageError(f"paths.{key} = {p} does not exist")
        return p

    def loader(self) -> FileLoader:
        manifest = json.loads(self.need("data/manifest.json", "synth or ingest").read_text())
        root = Path(manifest["image_root"])
        if not root.is_absolute():
            root = self.root / "data" / root
        return FileLoader(root, side=self.cfg["encoder"]["image_side"])

    def containers(self) -> list[ingest.NeighborhoodContainer]:
        rows = ingest.read_jsonl(self.need("data/containers.jsonl", "synth or ingest"))
        return ingest.gentrifiable(ingest.NeighborhoodContainer.from_dict(r) for r in rows)


def _dump(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _step1_config(cfg) -> Step1Config:
    e = cfg["encoder"]
    names = {f.name for f in fields(Step1Config)}
    return Step1Config(**{k: v for k, v in e.items() if k in names}, split=cfg["split"]["ratio"])


def _mil_config(cfg) -> mil.MILConfig:
    m, e = cfg["mil"], cfg["encoder"]
    return mil.MILConfig(W=m["W"], epochs=m["epochs"], lr=m["lr"], batch=m["batch"], seed=m["seed"],
                         split=cfg["split"]["ratio"], class_weighting=m["class_weighting"],
                         d=e["d"], depth=e["depth"], base_channels=e["base_channels"],
                         image_side=e["image_side"])


# --- stages ------------------------------------------------------------------

def cmd_synth(ws: Workspace, args) -> dict:
    sc = SynthConfig(**{"image_side": ws.cfg["encoder"]["image_side"], **ws.cfg["synth"]})
    city = gen_city(sc)
    out = write_city(city, ws.dir("data"))
    _dump(out / "manifest.json", {"source": "synthetic", "image_root": "."})
    return {"tracts": len(city.tracts), "bag_pairs": sum(len(c.pairs) for c in city.containers),
            "step1_pairs": len(city.step1_pairs), "planted_positives": len(city.planted)}


def cmd_ingest(ws: Workspace, args) -> dict:
    ic = ws.cfg["ingest"]
    paths = ws.cfg["paths"]
    cpi = ingest.load_cpi(paths.get("cpi"))
    mapping = ingest.load_naics_mapping(paths.get("naics_mapping"))
    permits = ingest.read_permits_csv(ws.input_path("permits"))
    businesses = ingest.read_businesses_csv(ws.input_path("businesses"))
    archive_path = ws.input_path("archive")
    archive = ingest.read_archive(archive_path)
    tracts = geodata.read_tracts(ws.input_path("tracts"))
    labels = ingest.read_labels_csv(ws.input_path("labels"))

    events = sorted(ingest.filter_permits(permits.records, cpi, ic["min_value"], base_year=ic["base_year"])
                    + ingest.detect_business_conversions(businesses.records, mapping))
    pairs, skipped = ingest.build_weak_labeled_pairs(events, archive, ic["radius_m"])
    containers, excluded = ingest.build_neighborhood_containers(
        archive, tracts, labels, ic["k_min"], ic["k_max"], ic["seed"])

    out = ws.dir("data")
    ingest.write_jsonl(out / "events.jsonl", (e.to_dict() for e in events))
    ingest.write_jsonl(out / "pairs.jsonl", (ingest.pair_record(p, l) for p, l in pairs))
    ingest.write_jsonl(out / "skipped_events.jsonl",
                       ({"event": events[i].to_dict(), "reason": r} for i, r in skipped))
    ingest.write_jsonl(out / "containers.jsonl", (c.to_dict() for c in containers))
    (out / "tracts.geojson").write_text(json.dumps(geodata.tracts_to_geojson(tracts), sort_keys=True) + "\n")
    ingest.write_labels_csv(out / "labels.csv", labels)
    _dump(out / "manifest.json", {"source": "ingest", "image_root": str(archive_path.parent.resolve())})
    report = {"events": len(events), "weak_pairs": len(pairs), "skipped_events": len(skipped),
              "containers": len(containers), "excluded_tracts": excluded,
              "skipped_permit_rows": len(permits.skipped), "skipped_business_rows": len(businesses.skipped)}
    _dump(out / "ingest_report.json", report)
    return report


def cmd_train_step1(ws: Workspace, args) -> dict:
    rows = ingest.read_jsonl(ws.need("data/pairs.jsonl", "synth or ingest"))
    dataset = [ingest.pair_from_record(r) for r in rows]
    result = train_change_detector(dataset, _step1_config(ws.cfg), ws.loader())
    out = ws.dir("step1")
    digest = result.params.save(out / "encoder.bin")
    write_training_log(out / "train_log.csv", result.log)
    report = {"test_accuracy": result.test_accuracy, "best_epoch": result.best_epoch,
              "n_train": len(result.train_ids), "n_test": len(result.test_ids), "params_hash": digest}
    _dump(out / "metrics.json", report)
    return report


def cmd_embed(ws: Workspace, args) -> dict:
    params = EncoderParams.load(ws.need("step1/encoder.bin", "train-step1"))
    containers = ws.containers()
    loader = ws.loader()
    out = ws.dir("embed")
    cache = embed_dataset(containers, params, loader, out / "embeddings.bin")
    e = ws.cfg["encoder"]
    ref = init_encoder(e["d"], e["depth"], e["base_channels"], e["image_side"], e["seed"])
    ref_cache = embed_dataset(containers, ref, loader, out / "embeddings_reference.bin")
    return {"pairs": len(cache), "dim": int(cache.matrix.shape[1]), "recomputed": cache.recomputed,
            "reference_recomputed": ref_cache.recomputed}


def _mode_cache(ws: Workspace, mode: str):
    if mode == "e2e":
        return None
    name = "embeddings_reference.bin" if mode == "pretrained_mean_pool" else "embeddings.bin"
    return EmbeddingCache.load(ws.need(f"embed/{name}", "embed"))


def cmd_train_step2(ws: Workspace, args) -> dict:
    mode = ws.cfg["mil"]["mode"]
    if mode not in mil.MODES:
        raise UsageError(f"unknown mode {mode!r}")
    containers = ws.containers()
    cache = _mode_cache(ws, mode)
    loader = ws.loader() if mode == "e2e" else None
    result = mil.train_mil(cache, containers, _mil_config(ws.cfg), mode, loader=loader)
    out = ws.dir("step2")
    meta = {"mode": mode, "train_ids": result.train_ids, "test_ids": result.test_ids,
            "split_seed": ws.cfg["mil"]["seed"]}
    digest = result.params.save(out / f"attention_{mode}.bin", meta)
    if result.encoder is not None:
        result.encoder.save(out / f"encoder_{mode}.bin")
    with open(out / f"log_{mode}.csv", "w") as fh:
        cols = list(result.log[0])
        fh.write(",".join(cols) + "\n")
        for row in result.log:
            fh.write(",".join(repr(row[c]) if isinstance(row[c], float) else str(row[c]) for c in cols) + "\n")
    return {"mode": mode, "params_hash": digest, "final_train_loss": result.log[-1]["train_loss"]}


def _trained(ws: Workspace, mode: str):
    path = ws.root / "step2" / f"attention_{mode}.bin"
    if not path.exists():
        return None
    params, meta = mil.AttentionParams.load(path)
    encoder = None
    if mode == "e2e":
        encoder = EncoderParams.load(ws.need(f"step2/encoder_{mode}.bin", "train-step2 --mode e2e"))
    return params, meta, encoder


def _predict_all(ws, mode, containers, trained):
    params, meta, encoder = trained
    cache = _mode_cache(ws, mode)
    loader = ws.loader() if encoder is not None else None
    return mil.predict_bags(containers, params, mode, cache=cache, encoder=encoder, loader=loader)


def cmd_eval(ws: Workspace, args) -> dict:
    modes = [args.mode] if args.mode else [m for m in mil.MODES if (ws.root / "step2" / f"attention_{m}.bin").exists()]
    if not modes or any(_trained(ws, m) is None for m in modes):
        raise UsageError("no trained Step-2 parameters found; run train-step2 first")
    containers = ws.containers()
    by_id = {c.tract_id: c for c in containers}
    out = ws.dir("eval")
    rows = []
    for mode in modes:
        trained = _trained(ws, mode)
        probs = _predict_all(ws, mode, containers, trained)
        preds = mil.classify_bags(probs)
        test_ids = trained[1]["test_ids"]
        m = evaluation.compute_metrics([by_id[t].y for t in test_ids], [preds[t] for t in test_ids])
        rows.append((ws.cfg["eval_city"], mode, m))
        _dump(out / f"predictions_{mode}.json",
              {"probabilities": probs, "predictions": preds, "test_ids": test_ids})
    (out / "metrics.json").write_text(evaluation.metrics_json(rows))
    table = evaluation.format_table(rows)
    (out / "table.txt").write_text(table + "\n")
    return {"table": table, "metrics": json.loads(evaluation.metrics_json(rows))}


def cmd_analyze(ws: Workspace, args) -> dict:
    mode = args.mode or "full"
    trained = _trained(ws, mode)
    if trained is None:
        raise UsageError(f"no trained Step-2 parameters for mode {mode}; run train-step2 first")
    params, meta, encoder = trained
    if encoder is not None:
        raise UsageError("analyze works on cached embeddings; e2e is not supported")
    cache = _mode_cache(ws, mode)
    containers = ws.containers()
    ac = ws.cfg["analysis"]
    out = ws.dir("analyze")
    plot = out / ac["plot"] if ac.get("plot") else None
    summary = analysis.curve_report(containers, params, cache, out / "curves.csv", plot, mode, ac["top_k"])
    _dump(out / "summary.json", summary)
    rng = np.random.default_rng(ws.cfg["split"]["seed"])
    pick = sorted(containers, key=lambda c: c.tract_id)[int(rng.integers(len(containers)))]
    ex = analysis.extreme_pairs(pick, params, cache, ac["k"], mode)
    _dump(out / "extremes.json", {"tract_id": pick.tract_id, "top": ex.top, "bottom": ex.bottom,
                                  "flagged": ex.flagged})
    mil.export_attention_csv(out / "attention.csv", containers, params, mode, cache=cache)
    k = ac["top_k"]
    return {"mean_top_mass_gentrifying": analysis.mean_top_mass(summary, "gentrifying", k),
            "mean_top_mass_non_gentrifying": analysis.mean_top_mass(summary, "non_gentrifying", k),
            "extreme_tract": pick.tract_id}


def cmd_map(ws: Workspace, args) -> dict:
    mode = args.mode or "full"
    pred_path = ws.need(f"eval/predictions_{mode}.json", "eval")
    preds = json.loads(pred_path.read_text())["predictions"]
    containers = ws.containers()
    labels = {c.tract_id: c.label for c in containers}
    classes = analysis.discrepancy_classes(labels, {t: int(preds[t]) for t in labels})
    tracts = [c.tract for c in containers]
    fc = analysis.export_map(tracts, classes)
    out = ws.dir("map")
    (out / "discrepancy.geojson").write_text(json.dumps(fc, sort_keys=True) + "\n")
    counts = {}
    for c in classes:
        counts[c.klass] = counts.get(c.klass, 0) + 1
    return {"features": len(fc["features"]), "classes": counts}


def cmd_fetch(ws: Workspace, args) -> dict:
    from .fetch import ClientConfig, fetch_street_views

    fc = ws.cfg["fetch"]
    if not fc.get("base_url"):
        raise UsageError("config fetch.base_url is required")
    roads = geodata.read_roads(ws.input_path("roads"))
    coords = geodata.sample_road_points(roads, ws.cfg["ingest"]["spacing_m"], ws.cfg["ingest"]["seed"])
    out = ws.dir("fetch")
    cc = ClientConfig(base_url=fc["base_url"], api_key_env=fc["api_key_env"],
                      rate_limit=fc["rate_limit"], cache_dir=str(out / "cache"))
    res = fetch_street_views(coords, (date.fromisoformat(fc["start"]), date.fromisoformat(fc["end"])),
                             cc, manifest_path=out / "manifest.jsonl", start_index=args.resume or 0)
    ingest.write_jsonl(out / "archive.jsonl", (im.to_dict() for im in res.images))
    return {"coordinates": len(coords), "images": len(res.images), "failures": len(res.failures),
            "cursor": res.cursor}


STAGES = {
    "ingest": cmd_ingest, "synth": cmd_synth, "train-step1": cmd_train_step1, "embed": cmd_embed,
    "train-step2": cmd_train_step2, "eval": cmd_eval, "analyze": cmd_analyze, "map": cmd_map,
    "fetch": cmd_fetch,
}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="gentrimil", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="stage", required=True)
    for name in STAGES:
        sp = sub.add_parser(name)
        sp.add_argument("--config", help="JSON config file")
        sp.add_argument("--seed", type=int, help="override every seed in the config")
        sp.add_argument("--mode", choices=mil.MODES)
        sp.add_argument("--json", action="store_true", help="machine-readable report")
        sp.add_argument("--work-dir", help="override paths.work_dir")
        if name == "fetch":
            sp.add_argument("--resume", type=int, help="coordinate index to resume from")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args)
        report = STAGES[args.stage](Workspace(cfg), args)
    except (UsageError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001
        print(f"runtime failure: {exc!r}", file=sys.stderr)
        return 2
    if args.json:
        print(json.dumps(report, indent=2, sort_keys=True, default=str))
    elif "table" in report:
        print(report["table"])
    else:
        for k, v in report.items():
            print(f"{k}: {v}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
