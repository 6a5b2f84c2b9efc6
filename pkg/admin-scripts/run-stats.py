#!/usr/bin/env python3

"""
📈 Run ledger statistics CLI

Reports pipeline runs recorded in <output_dir>/runs.db: a summary per
command, the most recent runs, and failures with their messages.
Defaults to a summary plus the last 10 runs.

Database schema (from runs.py):
- runs(id, command, config_hash, seed, started, finished, status, outputs, message)
"""

import argparse
import json
import os
import sqlite3
import sys
from datetime import datetime

from dotenv import load_dotenv


def fmt_date(ts: str | None) -> str:
    if not ts:
        return "-"
    try:
        dt = datetime.fromisoformat(ts.replace("Z", "+00:00"))
        return dt.strftime("%Y-%m-%d %H:%M:%S")
    except ValueError:
        return str(ts)


def duration(started: str | None, finished: str | None) -> str:
    if not started or not finished:
        return "-"
    try:
        secs = (datetime.fromisoformat(finished) - datetime.fromisoformat(started)).total_seconds()
    except ValueError:
        return "-"
    if secs < 60:
        return f"{secs:.1f}s"
    return f"{secs / 60:.1f}m"


def connect_or_die(path: str) -> sqlite3.Connection:
    if not os.path.exists(path):
        print(f"❌ Database not found: {path}", file=sys.stderr)
        print("💡 Run a pipeline command first or specify --db path", file=sys.stderr)
        sys.exit(1)
    try:
        conn = sqlite3.connect(path)
        conn.row_factory = sqlite3.Row
        return conn
    except sqlite3.Error as e:
        print(f"❌ Database error: {e}", file=sys.stderr)
        sys.exit(1)


def build_parser() -> argparse.ArgumentParser:
    epilog = """
Examples:
  %(prog)s                          # Summary + last 10 runs
  %(prog)s --summary                # Per-command summary only
  %(prog)s --runs -n 25             # Last 25 runs
  %(prog)s --runs --command train   # Only train runs
  %(prog)s --failures               # Failed runs with their messages
  %(prog)s --show 12                # Full record for run 12, outputs included
"""
    load_dotenv()
    default_db = os.path.join(os.getenv("FORECASTAD_OUTPUT_DIR", "runs"), "runs.db")
    parser = argparse.ArgumentParser(
        description="📈 Display pipeline run statistics from the run ledger",
        formatter_class=argparse.RawDescriptionHelpFormatter,
        epilog=epilog,
    )
    parser.add_argument("--db", type=str, default=default_db,
                        help=f"Path to database file (default: {default_db})")
    parser.add_argument("-n", "--number", type=int, default=10, help="Number of rows to display")
    parser.add_argument("--all", action="store_true", help="Show all rows (ignore -n)")
    parser.add_argument("--command", type=str, help="Filter by pipeline command")
    parser.add_argument("--status", choices=("running", "ok", "failed"), help="Filter by status")
    parser.add_argument("--config-hash", type=str, help="Filter by config hash prefix")

    group = parser.add_mutually_exclusive_group()
    group.add_argument("--summary", action="store_true", help="Show per-command summary")
    group.add_argument("--runs", action="store_true", help="Show recent runs")
    group.add_argument("--failures", action="store_true", help="Show failed runs with messages")
    group.add_argument("--show", type=int, metavar="ID", help="Show one run in full")
    return parser


def _where(command: str | None, status: str | None, config_hash: str | None):
    clauses, params = [], []
    if command:
        clauses.append("command = ?")
        params.append(command)
    if status:
        clauses.append("status = ?")
        params.append(status)
    if config_hash:
        clauses.append("config_hash LIKE ?")
        params.append(f"{config_hash}%")
    return (" WHERE " + " AND ".join(clauses)) if clauses else "", params


def print_summary(conn: sqlite3.Connection, command: str | None, config_hash: str | None):
    where, params = _where(command, None, config_hash)
    c = conn.cursor()
    c.execute(
        f"""
        SELECT command,
               COUNT(*) AS total,
               SUM(CASE WHEN status = 'ok' THEN 1 ELSE 0 END) AS ok,
               SUM(CASE WHEN status = 'failed' THEN 1 ELSE 0 END) AS failed,
               SUM(CASE WHEN status = 'running' THEN 1 ELSE 0 END) AS running,
               MAX(started) AS last_started
        FROM runs{where}
        GROUP BY command
        ORDER BY last_started DESC
        """,
        params,
    )
    rows = c.fetchall()
    c.execute(f"SELECT COUNT(DISTINCT config_hash) AS configs FROM runs{where}", params)
    configs = c.fetchone()["configs"] or 0

    print("📈 Run Summary")
    print("─" * 40)
    print(f"Distinct configs:   {configs}")
    if not rows:
        print("No runs recorded.")
        return
    print(f"{'Command':<18} {'Total':>5} {'OK':>5} {'Fail':>5} {'Run':>5}  Last started")
    for r in rows:
        print(f"{r['command']:<18} {r['total']:>5} {r['ok']:>5} {r['failed']:>5} {r['running']:>5}  "
              f"{fmt_date(r['last_started'])}")


def print_runs(conn: sqlite3.Connection, limit: int | None, command: str | None,
               status: str | None, config_hash: str | None):
    where, params = _where(command, status, config_hash)
    query = f"SELECT * FROM runs{where} ORDER BY id DESC"
    if limit:
        query += " LIMIT ?"
        params.append(limit)
    rows = conn.execute(query, params).fetchall()

    print("🧾 Recent Runs")
    print("─" * 40)
    if not rows:
        print("No runs found.")
        return
    icons = {"ok": "✅", "failed": "❌", "running": "⏳"}
    for r in rows:
        seed = "-" if r["seed"] is None else r["seed"]
        print(f"{icons.get(r['status'], '?')} #{r['id']:<4} {r['command']:<16} seed={seed:<3} "
              f"config={r['config_hash'][:12]}  {fmt_date(r['started'])}  "
              f"({duration(r['started'], r['finished'])})")


def print_failures(conn: sqlite3.Connection, limit: int | None, command: str | None, config_hash: str | None):
    where, params = _where(command, "failed", config_hash)
    query = f"SELECT * FROM runs{where} ORDER BY id DESC"
    if limit:
        query += " LIMIT ?"
        params.append(limit)
    rows = conn.execute(query, params).fetchall()

    print("❌ Failed Runs")
    print("─" * 40)
    if not rows:
        print("No failures recorded.")
        return
    for r in rows:
        print(f"#{r['id']} {r['command']} at {fmt_date(r['started'])}")
        print(f"   {r['message'] or '(no message)'}")


def print_run(conn: sqlite3.Connection, run_id: int):
    row = conn.execute("SELECT * FROM runs WHERE id = ?", (run_id,)).fetchone()
    if row is None:
        print(f"❌ No run with id {run_id}", file=sys.stderr)
        sys.exit(1)
    print(f"🔎 Run #{row['id']}")
    print("─" * 40)
    for key in ("command", "status", "seed", "config_hash"):
        print(f"{key + ':':<14} {row[key]}")
    print(f"{'started:':<14} {fmt_date(row['started'])}")
    print(f"{'finished:':<14} {fmt_date(row['finished'])}")
    print(f"{'duration:':<14} {duration(row['started'], row['finished'])}")
    if row["message"]:
        print(f"{'message:':<14} {row['message']}")
    try:
        outputs = json.loads(row["outputs"] or "[]")
    except json.JSONDecodeError:
        outputs = [row["outputs"]]
    if outputs:
        print("outputs:")
        for path in outputs:
            print(f"   {path}")


def main():
    parser = build_parser()
    args = parser.parse_args()
    conn = connect_or_die(args.db)
    limit = None if args.all else args.number

    try:
        if args.show is not None:
            print_run(conn, args.show)
        elif args.summary:
            print_summary(conn, args.command, args.config_hash)
        elif args.runs:
            print_runs(conn, limit, args.command, args.status, args.config_hash)
        elif args.failures:
            print_failures(conn, limit, args.command, args.config_hash)
        else:
            # Default view: summary + recent runs
            print_summary(conn, args.command, args.config_hash)
            print()
            print_runs(conn, 10, args.command, args.status, args.config_hash)
    except sqlite3.Error as e:
        print(f"❌ Database error: {e}", file=sys.stderr)
        sys.exit(1)
    finally:
        conn.close()


if __name__ == "__main__":
    main()
