#!/usr/bin/env python3

# Copyright (c) 2025 Robert McKenzie (@M1XZG)
# Repository: forecastad
#
# This software is released under the MIT License.
# See LICENSE.md for details.

# Run ledger: one row per pipeline command invocation, kept in <output_dir>/runs.db

import json
import logging
import sqlite3
from datetime import datetime, timezone
from pathlib import Path

logger = logging.getLogger("forecastad.runs")

RUNS_DB = "runs.db"


def _db_connect(output_dir) -> sqlite3.Connection:
    path = Path(output_dir) / RUNS_DB
    path.parent.mkdir(parents=True, exist_ok=True)
    return sqlite3.connect(path)


def _now_iso():
    return datetime.now(timezone.utc).isoformat()


def init_runs_db(output_dir):
    conn = _db_connect(output_dir)
    try:
        c = conn.cursor()
        c.execute(
            """
            CREATE TABLE IF NOT EXISTS runs (
                id INTEGER PRIMARY KEY AUTOINCREMENT,
                command TEXT NOT NULL,
                config_hash TEXT NOT NULL,
                seed INTEGER,
                started DATETIME NOT NULL,
                finished DATETIME,
                status TEXT NOT NULL,
                outputs TEXT,
                message TEXT
            )
            """
        )
        conn.commit()
    finally:
        conn.close()


def start_run(output_dir, command: str, config_hash: str, seed: int | None) -> int:
    init_runs_db(output_dir)
    conn = _db_connect(output_dir)
    try:
        c = conn.cursor()
        c.execute(
            "INSERT INTO runs (command, config_hash, seed, started, status) VALUES (?, ?, ?, ?, ?)",
            (command, config_hash, seed, _now_iso(), "running"),
        )
        conn.commit()
        return int(c.lastrowid)
    finally:
        conn.close()


def finish_run(output_dir, run_id: int, status: str, outputs=None, message: str | None = None):
    conn = _db_connect(output_dir)
    try:
        conn.execute(
            "UPDATE runs SET finished = ?, status = ?, outputs = ?, message = ? WHERE id = ?",
            (_now_iso(), status, json.dumps([str(o) for o in (outputs or [])]), message, run_id),
        )
        conn.commit()
    except sqlite3.Error as e:
        # ledger failures are logged, never raised
        logger.warning("Could not update run %s in ledger: %s", run_id, e)
    finally:
        conn.close()


def list_runs(output_dir, command: str | None = None, status: str | None = None, limit: int | None = None) -> list[dict]:
    if not (Path(output_dir) / RUNS_DB).exists():
        return []
    conn = _db_connect(output_dir)
    conn.row_factory = sqlite3.Row
    try:
        query = "SELECT * FROM runs"
        where, params = [], []
        if command:
            where.append("command = ?")
            params.append(command)
        if status:
            where.append("status = ?")
            params.append(status)
        if where:
            query += " WHERE " + " AND ".join(where)
        query += " ORDER BY id DESC"
        if limit:
            query += " LIMIT ?"
            params.append(int(limit))
        return [dict(r) for r in conn.execute(query, params).fetchall()]
    finally:
        conn.close()
