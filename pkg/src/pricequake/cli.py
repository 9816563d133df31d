"""Command-line pipeline: simulate, replay, calibrate, detect, report, ofc."""

from __future__ import annotations

import argparse
import csv
import json
import sys
from dataclasses import replace
from pathlib import Path
from typing import Sequence

import numpy as np

from pricequake import calibrate as calibrate_mod
from pricequake import dataio, detector, engine, ofc, reporting
from pricequake.detector import (
    EDGE_KIND_FOR_QUAKE,
    AvalancheRecord,
    CriticalityMark,
    ImpactEdge,
    QuakeKind,
    assemble_quakes,
    detect_impacts,
    marks_from_outcomes,
)
from pricequake.engine import EventOutcome, ModelParams
from pricequake.network import build_calendar, load_exchanges


def _meta_line(fh, **fields) -> None:
    fh.write(json.dumps({"meta": fields}, sort_keys=True) + "\n")


def _write_marks_with_meta(path: Path, marks, n: int, names: list[str]) -> None:
    with path.open("w") as fh:
        _meta_line(fh, n_exchanges=n, names=names)
        for m in marks:
            fh.write(
                json.dumps(
                    {
                        "event": detector.event_to_dict(m.event),
                        "versus": m.versus,
                        "sign": m.sign.value,
                    },
                    sort_keys=True,
                )
                + "\n"
            )


def _read_marks_with_meta(path: Path) -> tuple[dict, list[CriticalityMark]]:
    with path.open() as fh:
        meta = json.loads(fh.readline())["meta"]
    marks = []
    with path.open() as fh:
        fh.readline()
        for line in fh:
            d = json.loads(line)
            marks.append(
                CriticalityMark(
                    event=detector.event_from_dict(d["event"]),
                    versus=d["versus"],
                    sign=detector.Sign(d["sign"]),
                )
            )
    return meta, marks


def _write_records_with_meta(
    path: Path, records, kind: QuakeKind, n: int, names: list[str]
) -> None:
    with path.open("w") as fh:
        _meta_line(fh, n_exchanges=n, names=names, kind=kind.value)
        for r in records:
            fh.write(
                json.dumps(
                    {
                        "kind": r.kind.value,
                        "sign": r.sign.value,
                        "source": r.source,
                        "start": detector.event_to_dict(r.start),
                        "duration_events": r.duration_events,
                        "duration_days": r.duration_days,
                        "members": sorted(r.members),
                        "edges": [detector.edge_to_dict(e) for e in r.edges],
                        "sources_without_influence": sorted(r.sources_without_influence),
                    },
                    sort_keys=True,
                )
                + "\n"
            )


def _read_records_with_meta(path: Path) -> tuple[dict, list[AvalancheRecord]]:
    with path.open() as fh:
        meta = json.loads(fh.readline())["meta"]
        records = []
        for line in fh:
            d = json.loads(line)
            records.append(
                AvalancheRecord(
                    kind=QuakeKind(d["kind"]),
                    sign=detector.Sign(d["sign"]),
                    source=d["source"],
                    start=detector.event_from_dict(d["start"]),
                    duration_events=d["duration_events"],
                    duration_days=d["duration_days"],
                    members=frozenset(d["members"]),
                    edges=tuple(detector.edge_from_dict(e) for e in d["edges"]),
                    sources_without_influence=frozenset(d["sources_without_influence"]),
                )
            )
    return meta, records


def _write_edges_with_meta(
    path: Path, edges, kind: QuakeKind, n: int, names: list[str]
) -> None:
    with path.open("w") as fh:
        _meta_line(fh, n_exchanges=n, names=names, kind=kind.value)
        for e in edges:
            fh.write(json.dumps(detector.edge_to_dict(e), sort_keys=True) + "\n")


def _read_edges_with_meta(path: Path) -> tuple[dict, list[ImpactEdge]]:
    with path.open() as fh:
        meta = json.loads(fh.readline())["meta"]
        edges = [detector.edge_from_dict(json.loads(line)) for line in fh]
    return meta, edges


def _detect_one_kind(
    out: Path,
    outcomes: Sequence[EventOutcome],
    marks,
    threshold: float,
    kind: QuakeKind,
    n: int,
    names: list[str],
):
    params = ModelParams(threshold=threshold, zone_scale=1.0, cap_scale=1.0, noise_sd=0.0)
    edges = detect_impacts(outcomes, params, EDGE_KIND_FOR_QUAKE[kind])
    records = assemble_quakes(edges, marks, kind)
    _write_edges_with_meta(out / f"edges_{kind.value}.jsonl", edges, kind, n, names)
    _write_records_with_meta(out / f"quakes_{kind.value}.jsonl", records, kind, n, names)
    return edges, records


def _write_reports(
    out: Path,
    records,
    marks,
    edges,
    kind: QuakeKind,
    n: int,
    names: list[str],
) -> None:
    out.mkdir(parents=True, exist_ok=True)
    tag = kind.value
    reporting.write_summary_csv(out / f"summary_{tag}.csv", reporting.summarize(records))
    roles = reporting.role_counts(records, marks, n_exchanges=n, edges=edges)
    reporting.write_roles_csv(out / f"roles_{tag}.csv", roles, names)
    reporting.write_roles_pct_csv(out / f"roles_pct_{tag}.csv", roles, names)
    reporting.write_degrees_csv(
        out / f"degrees_{tag}.csv", reporting.degree_stats(records, n), names
    )
    reporting.write_sources_csv(
        out / f"sources_{tag}.csv", reporting.source_ranking(records, n), names
    )
    reporting.write_spread_csv(
        out / f"spread_{tag}.csv", reporting.spread_by_source(records, n), names
    )
    for measure in ("size", "duration"):
        path = out / f"{measure}_pdf_{tag}.csv"
        if records:
            reporting.write_distribution_csv(path, reporting.distribution(records, measure))
        else:
            reporting.write_distribution_csv(path, [])


def _write_raster(path: Path, outcomes, marks, edges) -> None:
    if not outcomes:
        path.write_text("day,slot\n")
        return
    keys, grid = detector.raster(outcomes, marks, edges)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["day", "slot"] + [f"ex{j}" for j in range(grid.shape[1])])
        for (day, slot), row in zip(keys, grid):
            w.writerow([day, slot] + [int(x) for x in row])


def _write_prices_csv(path: Path, prices: engine.PriceSeries, names: list[str]) -> None:
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["exchange", "name", "day", "slot", "kind", "ret", "price"])
        for ex in sorted(prices.points):
            for p in prices.points[ex]:
                w.writerow(
                    [
                        ex,
                        names[ex],
                        p.event.day,
                        p.event.slot,
                        p.event.kind.value,
                        repr(p.ret),
                        repr(p.price),
                    ]
                )


def _full_pipeline(
    out: Path,
    post_warmup: Sequence[EventOutcome],
    threshold: float,
    n: int,
    names: list[str],
    want_raster: bool,
) -> None:
    marks = marks_from_outcomes(post_warmup)
    _write_marks_with_meta(out / "marks.jsonl", marks, n, names)
    for kind in (QuakeKind.SIPQ, QuakeKind.CIPQ):
        edges, records = _detect_one_kind(
            out, post_warmup, marks, threshold, kind, n, names
        )
        _write_reports(out / "reports", records, marks, edges, kind, n, names)
        if want_raster:
            _write_raster(out / f"raster_{kind.value}.csv", post_warmup, marks, edges)


def cmd_simulate(args) -> int:
    params = dataio.load_params(args.params)
    if args.seed is not None:
        params = replace(params, seed=args.seed)
    exchanges = load_exchanges(args.exchanges)
    calendar = build_calendar(exchanges, args.days)
    result = engine.simulate(calendar, params, warmup_days=args.warmup_days)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    names = [e.name for e in exchanges]
    with (out / "meta.json").open("w") as fh:
        json.dump(
            {
                "params": dataio.params_dict(params),
                "days": args.days,
                "warmup_days": args.warmup_days,
                "warmup_events": result.warmup_events,
                "n_exchanges": len(exchanges),
                "names": names,
            },
            fh,
            indent=2,
            sort_keys=True,
        )
        fh.write("\n")
    engine.write_outcomes(
        out / "outcomes.jsonl",
        result.outcomes,
        n_exchanges=len(exchanges),
        threshold=params.threshold,
        warmup_events=result.warmup_events,
        mode="simulate",
        names=names,
    )
    _write_prices_csv(out / "prices.csv", result.prices, names)
    _full_pipeline(
        out, result.post_warmup, params.threshold, len(exchanges), names, args.raster
    )
    return 0


def _load_data_dir(data_dir: Path):
    exchanges = load_exchanges(data_dir / "exchanges.csv")
    dataset = dataio.ingest_dir(data_dir, exclude={"exchanges"})
    calendar = build_calendar(exchanges, num_days=len(dataset.all_dates))
    return exchanges, dataio.to_event_returns(dataset, calendar)


def cmd_replay(args) -> int:
    params = dataio.load_params(args.params)
    exchanges, ev_returns = _load_data_dir(Path(args.data))
    result = engine.replay(
        ev_returns.calendar,
        ev_returns.returns,
        params,
        present=ev_returns.present,
        warmup_days=args.warmup_days,
    )
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    names = [e.name for e in exchanges]
    engine.write_outcomes(
        out / "outcomes.jsonl",
        result.outcomes,
        n_exchanges=len(exchanges),
        threshold=params.threshold,
        warmup_events=result.warmup_events,
        mode="replay",
        names=names,
    )
    with (out / "residuals.csv").open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["exchange", "name", "day", "slot", "kind", "ret", "coupling", "residual"])
        for o in result.outcomes:
            ev = o.event
            w.writerow(
                [
                    ev.exchange_id,
                    names[ev.exchange_id],
                    ev.day,
                    ev.slot,
                    ev.kind.value,
                    repr(o.ret),
                    repr(o.coupling_term),
                    repr(o.noise),
                ]
            )
    _full_pipeline(
        out, result.post_warmup, params.threshold, len(exchanges), names, args.raster
    )
    return 0


def cmd_calibrate(args) -> int:
    _, ev_returns = _load_data_dir(Path(args.data))
    grid = {}
    if args.grid:
        with Path(args.grid).open() as fh:
            grid = json.load(fh)
    workers = grid.pop("workers", None)
    space_kwargs = {
        k: tuple(v) if isinstance(v, list) else v
        for k, v in grid.items()
    }
    space = calibrate_mod.SearchSpace(**space_kwargs)
    result = calibrate_mod.fit(
        ev_returns.returns,
        ev_returns.calendar,
        space,
        present=ev_returns.present,
        workers=workers,
    )
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    with (out / "calibration.json").open("w") as fh:
        json.dump(
            {
                "params": dataio.params_dict(result.params),
                "log_likelihood": result.log_likelihood,
                "residual_mean": result.residual_summary.mean,
                "residual_variance": result.residual_summary.variance,
                "residual_excess_kurtosis": result.residual_summary.excess_kurtosis,
                "trace": [
                    {"params": dataio.params_dict(p), "log_likelihood": ll}
                    for p, ll in result.search_trace
                ],
            },
            fh,
            indent=2,
            sort_keys=True,
        )
        fh.write("\n")
    diag = result.residual_summary
    centers = (diag.bin_edges[:-1] + diag.bin_edges[1:]) / 2.0
    with (out / "residual_histogram.csv").open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["bin", "count_returns", "count_coupling", "count_residual"])
        zeros = np.zeros(len(centers), dtype=int)
        rows = zip(
            centers,
            diag.counts.get("returns", zeros),
            diag.counts.get("coupling", zeros),
            diag.counts["residual"],
        )
        for center, cr, cc, cres in rows:
            w.writerow([repr(float(center)), int(cr), int(cc), int(cres)])
    return 0


def cmd_detect(args) -> int:
    meta, outcomes = engine.read_outcomes(args.outcomes)
    post = outcomes[meta["warmup_events"] :]
    kind = QuakeKind(args.kind)
    n = meta["n_exchanges"]
    names = meta.get("names") or [str(i) for i in range(n)]
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    marks = marks_from_outcomes(post)
    _write_marks_with_meta(out / "marks.jsonl", marks, n, names)
    edges, _records = _detect_one_kind(
        out, post, marks, meta["threshold"], kind, n, names
    )
    if args.raster:
        _write_raster(out / f"raster_{kind.value}.csv", post, marks, edges)
    return 0


def cmd_report(args) -> int:
    records_path = Path(args.records)
    meta, records = _read_records_with_meta(records_path)
    kind = QuakeKind(meta["kind"])
    marks_path = records_path.parent / "marks.jsonl"
    edges_path = records_path.parent / f"edges_{kind.value}.jsonl"
    for p in (marks_path, edges_path):
        if not p.exists():
            raise engine.InputError(f"missing companion file {p}")
    _, marks = _read_marks_with_meta(marks_path)
    _, edges = _read_edges_with_meta(edges_path)
    _write_reports(
        Path(args.out),
        records,
        marks,
        edges,
        kind,
        meta["n_exchanges"],
        meta.get("names") or [str(i) for i in range(meta["n_exchanges"])],
    )
    return 0


def cmd_ofc(args) -> int:
    lattice = ofc.OfcLattice.random(
        side=args.side, transfer=args.alpha, threshold=args.threshold, seed=args.seed
    )
    sizes = ofc.run_ofc(lattice, args.avalanches, warmup=args.warmup)
    with Path(args.out).open("w") as fh:
        for s in sizes:
            fh.write(f"{s}\n")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="pricequake",
        description="Cross-market stress contagion: simulation, replay, calibration and quake analysis.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="run the generative model end to end")
    p.add_argument("--params", required=True, help="parameter JSON file")
    p.add_argument("--exchanges", required=True, help="exchange registry CSV")
    p.add_argument("--days", required=True, type=int)
    p.add_argument("--seed", type=int, default=None, help="override the file's seed")
    p.add_argument("--out", required=True)
    p.add_argument("--warmup-days", type=int, default=engine.DEFAULT_WARMUP_DAYS)
    p.add_argument("--raster", action="store_true", help="also emit raster grids")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("replay", help="drive the model with observed prices")
    p.add_argument("--data", required=True, help="directory with exchanges.csv and price CSVs")
    p.add_argument("--params", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--warmup-days", type=int, default=engine.DEFAULT_WARMUP_DAYS)
    p.add_argument("--raster", action="store_true")
    p.set_defaults(func=cmd_replay)

    p = sub.add_parser("calibrate", help="maximum-likelihood parameter fit")
    p.add_argument("--data", required=True)
    p.add_argument("--grid", default=None, help="JSON search-space spec")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_calibrate)

    p = sub.add_parser("detect", help="quake detection over a stored outcome stream")
    p.add_argument("--outcomes", required=True)
    p.add_argument("--kind", required=True, choices=["sipq", "cipq"])
    p.add_argument("--out", required=True)
    p.add_argument("--raster", action="store_true")
    p.set_defaults(func=cmd_detect)

    p = sub.add_parser("report", help="statistics tables from stored quake records")
    p.add_argument("--records", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("ofc", help="spring-block lattice reference run")
    p.add_argument("--side", required=True, type=int)
    p.add_argument("--alpha", required=True, type=float)
    p.add_argument("--avalanches", required=True, type=int)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--threshold", type=float, default=1.0)
    p.add_argument("--warmup", type=int, default=None)
    p.set_defaults(func=cmd_ofc)

    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (OSError, ValueError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
