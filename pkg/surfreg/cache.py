"""Run registry for experiments, backed by sqlite."""

import json
import sqlite3
from contextlib import contextmanager
from pathlib import Path
from typing import Any, Dict, List, Optional


class RunCache:
    """Stores the metric row of every finished run under (config digest, run name)."""

    def __init__(self, directory: Path):
        self.directory = Path(directory)
        self.directory.mkdir(parents=True, exist_ok=True)
        self.db_path = self.directory / 'runs.db'
        self._init_database()

    def _init_database(self):
        """Initialize the run table."""
        with self._get_connection() as conn:
            cursor = conn.cursor()
            cursor.execute('''
                CREATE TABLE IF NOT EXISTS runs (
                    digest TEXT,
                    name TEXT,
                    metrics TEXT,  -- JSON object
                    finished_at TIMESTAMP DEFAULT CURRENT_TIMESTAMP,
                    PRIMARY KEY (digest, name)
                )
            ''')
            conn.commit()

    @contextmanager
    def _get_connection(self):
        """Get database connection with proper cleanup."""
        conn = sqlite3.connect(self.db_path)
        conn.row_factory = sqlite3.Row
        try:
            yield conn
        finally:
            conn.close()

    def store_run(self, digest: str, name: str, metrics: Dict[str, Any]):
        """Record a finished run, replacing any earlier row with the same key."""
        with self._get_connection() as conn:
            cursor = conn.cursor()
            cursor.execute('''
                INSERT OR REPLACE INTO runs (digest, name, metrics)
                VALUES (?, ?, ?)
            ''', (digest, name, json.dumps(metrics, sort_keys=True)))
            conn.commit()

    def get_run(self, digest: str, name: str) -> Optional[Dict[str, Any]]:
        """Metrics of a finished run, or None."""
        with self._get_connection() as conn:
            cursor = conn.cursor()
            cursor.execute('''
                SELECT metrics FROM runs
                WHERE digest = ? AND name = ?
            ''', (digest, name))
            row = cursor.fetchone()
            return json.loads(row['metrics']) if row else None

    def list_runs(self) -> List[Dict[str, Any]]:
        with self._get_connection() as conn:
            cursor = conn.cursor()
            cursor.execute('SELECT digest, name, metrics FROM runs ORDER BY digest, name')
            return [
                {'digest': row['digest'], 'name': row['name'], 'metrics': json.loads(row['metrics'])}
                for row in cursor.fetchall()
            ]

    def clear(self):
        """Forget every run."""
        with self._get_connection() as conn:
            conn.cursor().execute('DELETE FROM runs')
            conn.commit()
