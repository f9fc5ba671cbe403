import sqlite3

import pandas as pd

from utils import DatasetError


class RunHistoryDB:
    """sqlite history of evaluation scores: one row per (round, model, domain)."""

    def __init__(self, db_path="run_history.db"):
        self.db_path = db_path
        self._create_table()

    def _connect(self):
        try:
            return sqlite3.connect(self.db_path)
        except sqlite3.Error as e:
            raise DatasetError(f"Could not open run history {self.db_path}: {e}") from e

    def _create_table(self):
        with self._connect() as conn:
            conn.execute('''
                CREATE TABLE IF NOT EXISTS evaluations (
                    id INTEGER PRIMARY KEY AUTOINCREMENT,
                    run_name TEXT,
                    seed INTEGER,
                    round INTEGER,
                    model TEXT,
                    domain TEXT,
                    miou REAL,
                    pixel_count INTEGER
                )
            ''')
            conn.commit()

    def insert_summary(self, run_name, seed, round_index, model_name, summary):
        """Store every domain of an EvalSummary, plus a 'mean' row when there are several."""
        rows = [
            (run_name, seed, round_index, model_name, domain, report.miou, report.pixel_count)
            for domain, report in summary.reports.items()
        ]
        if len(summary.reports) > 1:
            rows.append((run_name, seed, round_index, model_name, "mean", summary.mean_miou, None))
        with self._connect() as conn:
            conn.executemany('''
                INSERT INTO evaluations (run_name, seed, round, model, domain, miou, pixel_count)
                VALUES (?, ?, ?, ?, ?, ?, ?)
            ''', rows)
            conn.commit()

    def get_all_results_df(self):
        """Returns all records in insertion order."""
        with self._connect() as conn:
            return pd.read_sql_query("SELECT * FROM evaluations ORDER BY id", conn)
