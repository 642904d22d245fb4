import logging
import math
import sqlite3
from typing import Dict, List, Optional

from wms_loop import Trajectory

# Set up logging
logging.basicConfig(level=logging.INFO)
logger = logging.getLogger(__name__)


def _real(value) -> Optional[float]:
    if value is None:
        return None
    value = float(value)
    return None if math.isnan(value) else value


class RunLedgerDatabase:
    def __init__(self, db_path: str = "ledger.db"):
        self.db_path = str(db_path)
        self.init_database()

    def init_database(self):
        """Initialize the ledger with the runs, iterations and relocations tables"""
        with sqlite3.connect(self.db_path) as conn:
            cursor = conn.cursor()

            # One row per simulated run
            cursor.execute("""
                CREATE TABLE IF NOT EXISTS runs (
                    id INTEGER PRIMARY KEY AUTOINCREMENT,
                    experiment INTEGER NOT NULL,
                    run_index INTEGER NOT NULL,
                    run_seed INTEGER NOT NULL,
                    scale TEXT,
                    iterations INTEGER DEFAULT 0,
                    initial_silhouette REAL,
                    final_silhouette REAL,
                    delta REAL,
                    final_state_digest TEXT,
                    created_at TIMESTAMP DEFAULT CURRENT_TIMESTAMP,
                    UNIQUE (experiment, run_index)
                )
            """)

            # Per-iteration trajectory statistics
            cursor.execute("""
                CREATE TABLE IF NOT EXISTS iterations (
                    id INTEGER PRIMARY KEY AUTOINCREMENT,
                    run_id INTEGER NOT NULL,
                    n INTEGER NOT NULL,
                    silhouette REAL,
                    area REAL,
                    relocations INTEGER DEFAULT 0,
                    blocked INTEGER DEFAULT 0,
                    n_stops INTEGER,
                    route_len_exact INTEGER,
                    route_len_approx INTEGER,
                    stock_before INTEGER,
                    stock_after INTEGER,
                    state_digest TEXT,
                    FOREIGN KEY (run_id) REFERENCES runs (id)
                )
            """)

            # Relocation events
            cursor.execute("""
                CREATE TABLE IF NOT EXISTS relocations (
                    id INTEGER PRIMARY KEY AUTOINCREMENT,
                    run_id INTEGER NOT NULL,
                    n INTEGER NOT NULL,
                    article INTEGER NOT NULL,
                    from_i INTEGER, from_j INTEGER, from_k INTEGER,
                    to_i INTEGER, to_j INTEGER, to_k INTEGER,
                    shortfall INTEGER,
                    residue INTEGER,
                    top_up INTEGER,
                    distance_before REAL,
                    distance_after REAL,
                    FOREIGN KEY (run_id) REFERENCES runs (id)
                )
            """)

            conn.commit()

    def record_run(self, experiment: int, run_index: int, run_seed: int, scale: str, iterations: int,
                   initial: float, final: float, final_state_digest: str) -> Optional[int]:
        """Insert or replace a run row; returns its id"""
        try:
            with sqlite3.connect(self.db_path) as conn:
                cursor = conn.cursor()
                cursor.execute("""
                    SELECT id FROM runs WHERE experiment = ? AND run_index = ?
                """, (experiment, run_index))
                existing = cursor.fetchone()
                if existing:
                    cursor.execute("DELETE FROM iterations WHERE run_id = ?", (existing[0],))
                    cursor.execute("DELETE FROM relocations WHERE run_id = ?", (existing[0],))
                    cursor.execute("DELETE FROM runs WHERE id = ?", (existing[0],))

                cursor.execute("""
                    INSERT INTO runs (experiment, run_index, run_seed, scale, iterations,
                                      initial_silhouette, final_silhouette, delta, final_state_digest)
                    VALUES (?, ?, ?, ?, ?, ?, ?, ?, ?)
                """, (experiment, run_index, run_seed, scale, iterations,
                      _real(initial), _real(final), _real(final - initial), final_state_digest))

                run_id = cursor.lastrowid
                conn.commit()
                return run_id

        except Exception as e:
            logger.error(f"Error recording run: {str(e)}")
            return None

    def save_trajectory(self, run_id: int, trajectory: Trajectory) -> bool:
        """Save per-iteration records and relocation events of a run"""
        try:
            with sqlite3.connect(self.db_path) as conn:
                cursor = conn.cursor()

                cursor.executemany("""
                    INSERT INTO iterations (run_id, n, silhouette, area, relocations, blocked, n_stops,
                                            route_len_exact, route_len_approx, stock_before, stock_after,
                                            state_digest)
                    VALUES (?, ?, ?, ?, ?, ?, ?, ?, ?, ?, ?, ?)
                """, [
                    (run_id, r.n, _real(r.silhouette), _real(r.triangle_area), r.relocations, r.blocked,
                     r.n_stops, r.route_len_exact, r.route_len_approx, r.stock_before, r.stock_after,
                     r.state_digest)
                    for r in trajectory.records
                ])

                cursor.executemany("""
                    INSERT INTO relocations (run_id, n, article, from_i, from_j, from_k, to_i, to_j, to_k,
                                             shortfall, residue, top_up, distance_before, distance_after)
                    VALUES (?, ?, ?, ?, ?, ?, ?, ?, ?, ?, ?, ?, ?, ?)
                """, [
                    (run_id, e["n"], e["article"], *e["from_node"], *e["to_node"],
                     e["shortfall"], e["residue"], e["top_up"], e["distance_before"], e["distance_after"])
                    for e in trajectory.events if e["kind"] == "relocation"
                ])

                conn.commit()
                return True

        except Exception as e:
            logger.error(f"Error saving trajectory: {str(e)}")
            return False

    def get_runs(self, experiment: int = None) -> List[Dict]:
        """Get recorded runs, optionally for one experiment"""
        try:
            with sqlite3.connect(self.db_path) as conn:
                cursor = conn.cursor()

                query = """
                    SELECT id, experiment, run_index, run_seed, scale, iterations,
                           initial_silhouette, final_silhouette, delta, final_state_digest
                    FROM runs
                """
                params = ()
                if experiment is not None:
                    query += " WHERE experiment = ?"
                    params = (experiment,)
                query += " ORDER BY experiment, run_index"
                cursor.execute(query, params)

                runs = []
                for row in cursor.fetchall():
                    runs.append({
                        'id': row[0],
                        'experiment': row[1],
                        'run_index': row[2],
                        'run_seed': row[3],
                        'scale': row[4],
                        'iterations': row[5],
                        'initial': row[6],
                        'final': row[7],
                        'delta': row[8],
                        'final_state_digest': row[9]
                    })

                return runs

        except Exception as e:
            logger.error(f"Error getting runs: {str(e)}")
            return []

    def get_run_iterations(self, run_id: int) -> List[Dict]:
        try:
            with sqlite3.connect(self.db_path) as conn:
                cursor = conn.cursor()

                cursor.execute("""
                    SELECT n, silhouette, area, relocations, blocked, n_stops, state_digest
                    FROM iterations
                    WHERE run_id = ?
                    ORDER BY n
                """, (run_id,))

                return [
                    {
                        'n': row[0],
                        'silhouette': row[1],
                        'area': row[2],
                        'relocations': row[3],
                        'blocked': row[4],
                        'n_stops': row[5],
                        'state_digest': row[6]
                    }
                    for row in cursor.fetchall()
                ]

        except Exception as e:
            logger.error(f"Error getting iterations: {str(e)}")
            return []

    def get_experiment_deltas(self) -> Dict[int, List[float]]:
        """Run-level silhouette improvements grouped by experiment"""
        deltas: Dict[int, List[float]] = {}
        for run in self.get_runs():
            if run['delta'] is not None:
                deltas.setdefault(run['experiment'], []).append(run['delta'])
        return deltas

    def count_relocations(self, run_id: int) -> int:
        try:
            with sqlite3.connect(self.db_path) as conn:
                cursor = conn.cursor()
                cursor.execute("SELECT COUNT(*) FROM relocations WHERE run_id = ?", (run_id,))
                return cursor.fetchone()[0] or 0

        except Exception as e:
            logger.error(f"Error counting relocations: {str(e)}")
            return 0
