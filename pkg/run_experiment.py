"""
Run a precoder sweep and (optionally) push the results to the archive service.
Works both:
- locally, writing CSVs under --out (or UCN_OUT_DIR)
- with --upload <url>, posting the finished run to app.py's bulk endpoint

    python run_experiment.py --config desk.env --trials 2 --trajectory
    python run_experiment.py --report-only results/
"""

import argparse
import logging
import os
import sys
import uuid
from dataclasses import asdict
from datetime import datetime

import requests
from dotenv import load_dotenv

from precoders.errors import ConfigurationError, ParseError
from precoders.experiment import ExperimentSpec, load_spec, report_trends, run_experiment

log = logging.getLogger("run_experiment")

LOCAL_ARCHIVE_URL = "http://127.0.0.1:5000"


# ---------------------------------------------------------------------
# UPLOAD
# ---------------------------------------------------------------------
def upload_results(run_id: str, spec: ExperimentSpec, rows, api_url: str) -> bool:
    """
    Try to upload to the given api_url.
    If that target is unreachable or refuses the run, fall back to a local archive.
    """
    payload = {
        "run": {
            "run_id": run_id,
            "seed": spec.seed,
            "trials": spec.trials,
            "config": {k: v for k, v in asdict(spec).items() if k not in ("workers", "out_dir")},
        },
        "rows": [asdict(r) for r in rows],
    }
    urls_to_try = [api_url.rstrip("/")]
    if not api_url.startswith("http://127.0.0.1"):
        urls_to_try.append(LOCAL_ARCHIVE_URL)

    last_err = None
    for url in urls_to_try:
        try:
            resp = requests.post(f"{url}/api/admin/results/bulk", json=payload, timeout=30)
            if resp.status_code == 200:
                body = resp.json()
                print(f"↩️  archive responded with 200 at {url}")
                print(f"📦 stored {body.get('rows_added')} rows, skipped {body.get('rows_skipped')}")
                return True
            print(f"❌ Upload failed to {url}: {resp.status_code}")
            last_err = resp.text
        except requests.RequestException as e:
            print(f"❌ Error uploading to {url}: {e}")
            last_err = str(e)

    print("❌ Failed to upload results to all targets")
    if last_err:
        print(f"Last error: {last_err}")
    return False


# ---------------------------------------------------------------------
# ORCHESTRATOR
# ---------------------------------------------------------------------
def _progress(outcome):
    row = outcome.row
    if row.ok:
        print(f"   trial {row.trial} P={row.power_dbm:g} dBm bsc={row.bsc} {row.method:<5} "
              f"wsr={row.wsr_bits:.4f} bits iters={row.outer_iter}")
    else:
        print(f"   ❌ trial {row.trial} P={row.power_dbm:g} dBm bsc={row.bsc} {row.method}: {row.status}")


def run_sweep(spec: ExperimentSpec, upload_url: str = None) -> int:
    run_id = datetime.now().strftime("%Y%m%d-%H%M%S-") + uuid.uuid4().hex[:6]
    print("\n" + "=" * 60)
    print(f"Starting sweep {run_id} at {datetime.now().strftime('%Y-%m-%d %H:%M:%S')}")
    print(f"B={spec.num_bs} U={spec.num_ut} Mt={spec.mt} Mr={spec.mr} "
          f"P={list(spec.power_dbm)} dBm bsc={list(spec.bsc)} methods={list(spec.methods)}")
    print("=" * 60 + "\n")

    result = run_experiment(spec, progress=_progress)

    print("\n" + "=" * 60)
    print(f"Cells finished: {len(result.rows)} ({len(result.failed)} failed)")
    print(f"CSVs written to {result.out_dir}")
    print("=" * 60 + "\n")
    print(report_trends(result.out_dir))

    if upload_url:
        print("📤 Uploading results to archive...")
        if not upload_results(run_id, spec, result.rows, upload_url):
            return 1
    print("✅ Sweep completed")
    return 0


# ---------------------------------------------------------------------
# CLI
# ---------------------------------------------------------------------
def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(description="User-centric network precoder sweep (RCG vs linear baselines)")
    parser.add_argument("--config", help="flat key=value experiment file")
    parser.add_argument("--seed", type=int, help="master seed (u64)")
    parser.add_argument("--out", dest="out_dir", help="output directory for CSVs")
    parser.add_argument("--methods", help="comma list, e.g. rcg,mrt,zf,mmse")
    parser.add_argument("--trajectory", action="store_true", default=None, help="write per-iteration rows")
    parser.add_argument("--trials", type=int, help="Monte-Carlo channel draws")
    parser.add_argument("--workers", type=int, help="process pool size for sweep cells")
    parser.add_argument("--timing", action="store_true", default=None, help="record wall_ms (breaks byte-identity)")
    parser.add_argument("--upload", nargs="?", const="", default=None,
                        help="post the run to the archive (default UCN_ARCHIVE_URL)")
    parser.add_argument("--report-only", metavar="DIR", help="summarize an existing run directory and exit")
    return parser


def main(argv=None) -> int:
    load_dotenv()
    logging.basicConfig(
        level=os.getenv("UCN_LOG_LEVEL", "INFO").upper(),
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )
    args = build_parser().parse_args(argv)

    try:
        if args.report_only:
            print(report_trends(args.report_only))
            return 0

        overrides = {
            "seed": args.seed,
            "out_dir": args.out_dir,
            "methods": tuple(m.strip().lower() for m in args.methods.split(",") if m.strip()) if args.methods else None,
            "trajectory": args.trajectory,
            "trials": args.trials,
            "workers": args.workers,
            "timing": args.timing,
        }
        spec = load_spec(args.config, overrides)
        upload_url = None
        if args.upload is not None:
            upload_url = args.upload or os.getenv("UCN_ARCHIVE_URL", LOCAL_ARCHIVE_URL)
        return run_sweep(spec, upload_url)

    except (ConfigurationError, ParseError) as e:
        print(f"❌ {e}", file=sys.stderr)
        return 2
    except OSError as e:
        print(f"❌ I/O error: {e}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    raise SystemExit(main())
