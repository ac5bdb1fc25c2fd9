"""Command-line entry point: ``rappor <command> ...``.

Batch commands (encode, decode, simulate, sweep, limits, attack, privacy)
run in-process on files. ``serve`` starts the collection service and
``submit`` / ``remote-decode`` talk to a running one.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from rappor import analysis, harness
from rappor.client import Client, MemoStore, MemoStoreError, serialize_report
from rappor.decoder import DecodeOptions, MalformedReport, decode
from rappor.params import InvalidParams, Params, privacy_report

log = logging.getLogger("rappor")

CONFIG_DIR = Path(__file__).parent / "configs"


def _read_lines(path) -> list[str]:
    text = Path(path).read_text(encoding="utf-8")
    return [line for line in text.split("\n") if line != ""]


def cmd_privacy(args) -> int:
    print(privacy_report(Params.load(args.config)).format(4))
    return 0


def cmd_encode(args) -> int:
    params = Params.load(args.config)
    categories = _read_lines(args.categories) if args.categories else None
    store = MemoStore(args.memo, k=params.k)
    client = Client(params, np.random.default_rng(args.seed), cohort=args.cohort, store=store,
                    categories=categories)
    out = sys.stdout
    for value in _read_lines(args.value_file):
        out.write(serialize_report(client.report(value)).decode() + "\n")
    return 0


def cmd_decode(args) -> int:
    params = Params.load(args.config)
    options = DecodeOptions(alpha=args.alpha, correction=args.correction, seed=args.seed,
                            strict=args.strict)
    candidates = _read_lines(args.candidates)
    with open(args.reports, "rb") as fh:
        result = decode(fh, candidates, params, options)
    if args.out:
        result.write(args.out)
        log.info("wrote %s (%d rows, %d significant)", args.out, len(result.rows),
                 len(result.significant()))
    else:
        sys.stdout.write(result.to_csv())
    if result.skipped_reports:
        print(f"skipped {result.skipped_reports} malformed reports", file=sys.stderr)
    return 0


def _write_rows(rows, columns, dest) -> None:
    if dest:
        Path(dest).write_text(harness.rows_to_csv(rows, columns))
    else:
        sys.stdout.write(harness.rows_to_csv(rows, columns))


def cmd_limits(args) -> int:
    if args.sweep:
        name, values = analysis.parse_sweep(args.sweep)
        if name not in ("N", "M", "q", "alpha"):
            raise SystemExit("limits sweep variable must be one of N, M, q, alpha")
        rows = []
        for v in values:
            point = {"q": args.q, "N": args.N, "M": args.M, "alpha": args.alpha}
            point[name] = int(round(v)) if name == "M" else float(v)
            rows.append(dict(point, threshold=analysis.detection_threshold(**point),
                             max_learnable=analysis.max_learnable_strings(**point)))
        _write_rows(rows, ["q", "N", "M", "alpha", "threshold", "max_learnable"], args.csv)
        return 0
    threshold = analysis.detection_threshold(args.q, args.N, args.M, args.alpha)
    x = analysis.max_learnable_strings(args.q, args.N, args.M, args.alpha)
    print(f"critical value  {analysis.critical_value(args.M, args.alpha):.4f}")
    print(f"threshold       {threshold:.1f}")
    print(f"max learnable   {x}")
    return 0


def cmd_attack(args) -> int:
    params = Params.load(args.config)
    s = params.h if args.s is None else args.s
    if args.sweep:
        name, values = analysis.parse_sweep(args.sweep)
        if name != "fv":
            raise SystemExit("attack sweep variable must be fv")
        rows = [{"fv": float(fv), "s": s,
                 "posterior": analysis.attacker_posterior(analysis.AttackerQuery(float(fv), params, s)),
                 "fdr": analysis.attacker_target_fdr(float(fv), params)} for fv in values]
        _write_rows(rows, ["fv", "s", "posterior", "fdr"], args.csv)
        return 0
    post = analysis.attacker_posterior(analysis.AttackerQuery(args.fv, params, s))
    print(f"posterior  {post:.4f}")
    print(f"fdr        {analysis.attacker_target_fdr(args.fv, params):.4f}")
    print(f"silent     {analysis.silent_client_probability(params.h, params.f):.4f}")
    return 0


def _scenario(name: str) -> tuple[harness.PopulationSpec, Params | None]:
    if name == "normal":
        return harness.PopulationSpec.normal(), Params.load(CONFIG_DIR / "normal.json")
    if name == "exponential":
        return harness.PopulationSpec.exponential_decay(), Params.load(CONFIG_DIR / "exponential.json")
    data = json.loads(Path(name).read_text())
    params = Params.from_dict(data["params"]) if "params" in data else None
    return harness.PopulationSpec.from_dict(data["population"]), params


def cmd_simulate(args) -> int:
    population, params = _scenario(args.scenario)
    if args.config:
        params = Params.load(args.config)
    if params is None:
        raise SystemExit("no params: pass --config or include 'params' in the scenario file")
    scale = harness.FULL_SCALE if args.full else harness.DESK_SCALE
    n = args.n or scale["n"]
    replicates = args.replicates or scale["replicates"]
    options = DecodeOptions(alpha=args.alpha, correction=args.correction, seed=args.seed)
    metrics = []
    first = None
    for r in range(replicates):
        config = harness.SimConfig(population, params, n, seed=harness.replicate_seed(args.seed, 0, r),
                                   options=options)
        sim, decoded, m = harness.run_once(config)
        if first is None:
            first = (sim, decoded)
        metrics.append(m)
        log.info("replicate %d: precision %.3f recall %.3f detected %d", r, m.precision, m.recall,
                 m.detected)
    harness.write_simulation(Path(args.out), first[0], first[1], metrics)
    mean = {key: float(np.mean([getattr(m, key) for m in metrics]))
            for key in ("precision", "recall", "raw_recall", "false_positives", "l1_error")}
    print(json.dumps({"n": n, "replicates": replicates, **mean}, indent=2))
    return 0


def cmd_sweep(args) -> int:
    data = json.loads(Path(args.grid).read_text())
    grid, replicates, seed = harness.expand_grid(data)
    if args.replicates:
        replicates = args.replicates
    rows = harness.run_experiment(grid, replicates, seed=seed, workers=args.workers)
    _write_rows(rows, harness.EXPERIMENT_COLUMNS, args.out)
    return 0


def cmd_serve(args) -> int:
    import uvicorn

    uvicorn.run("rappor.service.app:app", host=args.host, port=args.port, log_level="info")
    return 0


def _client(server: str):
    import httpx

    return httpx.Client(base_url=server.rstrip("/"), timeout=600)


def _raise_for(resp) -> None:
    if resp.status_code >= 400:
        raise SystemExit(f"server error {resp.status_code}: {resp.text}")


def cmd_submit(args) -> int:
    with _client(args.server) as http:
        if args.config:
            params = Params.load(args.config)
            _raise_for(http.post("/collections", json={"name": args.collection,
                                                        "params": params.to_dict()}))
        accepted = skipped = 0
        batch: list = []

        def flush():
            nonlocal accepted, skipped
            if batch:
                resp = http.post(f"/collections/{args.collection}/reports", json={"reports": batch})
                _raise_for(resp)
                body = resp.json()
                accepted += body["accepted"]
                skipped += body["skipped"]
                batch.clear()

        with open(args.reports) as fh:
            for line in fh:
                if not line.strip():
                    continue
                try:
                    batch.append(json.loads(line))
                except json.JSONDecodeError:
                    skipped += 1
                    continue
                if len(batch) >= args.batch_size:
                    flush()
        flush()
    print(f"accepted {accepted}, skipped {skipped}")
    return 0


def cmd_remote_decode(args) -> int:
    body = {"candidates": _read_lines(args.candidates), "alpha": args.alpha,
            "correction": args.correction, "seed": args.seed}
    with _client(args.server) as http:
        resp = http.post(f"/collections/{args.collection}/decode", json=body)
        _raise_for(resp)
    data = resp.json()
    columns = ["candidate", "estimate", "stderr", "p_value", "proportion", "significant"]
    rows = [{**r, "significant": "true" if r["significant"] else "false"} for r in data["rows"]]
    _write_rows(rows, columns, args.out)
    if args.out:
        Path(args.out + ".meta.json").write_text(json.dumps(data["metadata"], indent=2))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="rappor", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("privacy", help="print q*, p*, eps_inf and eps_one for a config")
    p.add_argument("--config", required=True)
    p.set_defaults(func=cmd_privacy)

    p = sub.add_parser("encode", help="encode values into JSONL reports on stdout")
    p.add_argument("--config", required=True)
    p.add_argument("--cohort", type=int, required=True)
    p.add_argument("--memo", required=True, help="memo store file (created if missing)")
    p.add_argument("--value-file", required=True)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--categories", help="category list for basic modes, one per line")
    p.set_defaults(func=cmd_encode)

    def decode_flags(p):
        p.add_argument("--candidates", required=True)
        p.add_argument("--alpha", type=float, default=0.05)
        p.add_argument("--correction", choices=["bonferroni", "bh"], default="bonferroni")
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--out")

    p = sub.add_parser("decode", help="decode a JSONL report file against candidates")
    p.add_argument("--config", required=True)
    p.add_argument("--reports", required=True)
    p.add_argument("--strict", action="store_true", help="abort on the first malformed report")
    decode_flags(p)
    p.set_defaults(func=cmd_decode)

    p = sub.add_parser("limits", help="detection threshold and max learnable strings")
    p.add_argument("--q", type=float, required=True)
    p.add_argument("--N", type=float, required=True)
    p.add_argument("--M", type=int, required=True)
    p.add_argument("--alpha", type=float, default=0.05)
    p.add_argument("--sweep", help="e.g. N=1e6:1e10:50")
    p.add_argument("--csv", help="write the sweep here instead of stdout")
    p.set_defaults(func=cmd_limits)

    p = sub.add_parser("attack", help="attacker posterior and target-set FDR")
    p.add_argument("--config", required=True)
    p.add_argument("--fv", type=float, default=0.1)
    p.add_argument("--s", type=int, default=None, help="signal bits observed (default h)")
    p.add_argument("--sweep", help="e.g. fv=0.001:0.5:100")
    p.add_argument("--csv")
    p.set_defaults(func=cmd_attack)

    p = sub.add_parser("simulate", help="simulate, decode and score one scenario")
    p.add_argument("--scenario", required=True, help="normal | exponential | custom.json")
    p.add_argument("--config")
    p.add_argument("--n", type=int)
    p.add_argument("--replicates", type=int)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--alpha", type=float, default=0.05)
    p.add_argument("--correction", choices=["bonferroni", "bh"], default="bonferroni")
    p.add_argument("--full", action="store_true", help="full scale: N=1e6, 10 replicates")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("sweep", help="run a parameter grid and write averaged metrics")
    p.add_argument("--grid", required=True)
    p.add_argument("--out")
    p.add_argument("--replicates", type=int)
    p.add_argument("--workers", type=int, default=1)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("serve", help="run the collection service")
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=8000)
    p.set_defaults(func=cmd_serve)

    p = sub.add_parser("submit", help="post a JSONL report file to a collection")
    p.add_argument("--server", default="http://127.0.0.1:8000")
    p.add_argument("--collection", required=True)
    p.add_argument("--reports", required=True)
    p.add_argument("--config", help="create the collection with these params first")
    p.add_argument("--batch-size", type=int, default=5000)
    p.set_defaults(func=cmd_submit)

    p = sub.add_parser("remote-decode", help="decode a collection held by the service")
    p.add_argument("--server", default="http://127.0.0.1:8000")
    p.add_argument("--collection", required=True)
    decode_flags(p)
    p.set_defaults(func=cmd_remote_decode)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except InvalidParams as exc:
        print("invalid params:\n  " + "\n  ".join(exc.errors), file=sys.stderr)
        return 2
    except (MalformedReport, MemoStoreError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
