"""
SQLite run registry for semifmm.
Stage runs and per-coefficient chain checkpoints, behind asyncio.to_thread.
"""
import asyncio
import sqlite3
import uuid
from contextlib import closing
from datetime import datetime
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional, Tuple, TypeVar

from typing_extensions import Self

from .config import logger
from .utils import PathLike, file_checksum

DB_NAME = "runs.db"
T = TypeVar("T")


def _as_dict(row: Optional[sqlite3.Row]) -> Optional[Dict[str, Any]]:
    return dict(row) if row else None


class RunStore:
    """Async SQLite wrapper with migration support."""

    def __init__(self, db_path: PathLike):
        self.db_path = str(db_path)
        self._lock = asyncio.Lock()
        self._initialized = False

    @classmethod
    def for_output(cls, output_dir: PathLike) -> Self:
        return cls(Path(output_dir) / DB_NAME)

    async def initialize(self) -> None:
        """Create the database if needed and run migrations."""
        if self._initialized:
            return
        Path(self.db_path).parent.mkdir(parents=True, exist_ok=True)
        await self._run_migrations()
        self._initialized = True
        logger.debug(f"✅ Run registry ready at {self.db_path}")

    async def _run_migrations(self) -> None:
        steps = (
            self._migration_001_initial_schema,
            self._migration_002_add_checkpoints,
            self._migration_003_add_run_message,
        )
        applied = await self._get_schema_version()
        for number, step in enumerate(steps, start=1):
            if number <= applied:
                continue
            logger.info(f"🔄 Running registry migration {number}")
            await step()
            await self.execute(
                "INSERT OR REPLACE INTO schema_migrations (version, applied_at, description) VALUES (?, ?, ?)",
                (number, datetime.now().isoformat(), step.__doc__ or f"Migration {number}"),
            )

    def _connect(self) -> sqlite3.Connection:
        conn = sqlite3.connect(self.db_path)
        conn.row_factory = sqlite3.Row
        conn.execute("PRAGMA foreign_keys=ON")
        conn.execute("PRAGMA busy_timeout=5000")
        return conn

    async def _with_connection(self, work: Callable[[sqlite3.Connection], T]) -> T:
        """Run `work` on a fresh connection in a worker thread, one call at a time."""
        def _call() -> T:
            with closing(self._connect()) as conn:
                return work(conn)

        async with self._lock:
            return await asyncio.to_thread(_call)

    async def _get_schema_version(self) -> int:
        try:
            row = await self._with_connection(
                lambda conn: conn.execute("SELECT MAX(version) FROM schema_migrations").fetchone()
            )
        except sqlite3.OperationalError:
            return 0
        return int(row[0]) if row and row[0] else 0

    async def execute(self, query: str, params: Tuple = ()) -> int:
        """Execute a statement and return the affected row count."""
        def _write(conn: sqlite3.Connection) -> int:
            cursor = conn.execute(query, params)
            conn.commit()
            return cursor.rowcount

        try:
            return await self._with_connection(_write)
        except sqlite3.Error as e:
            logger.error(f"❌ Registry write failed: {e} ({query.split()[0]})")
            raise

    async def fetch_dict(self, query: str, params: Tuple = ()) -> Optional[Dict[str, Any]]:
        try:
            row = await self._with_connection(lambda conn: _as_dict(conn.execute(query, params).fetchone()))
        except sqlite3.Error as e:
            logger.error(f"❌ Registry read failed: {e}")
            return None
        return row

    async def fetch_all_dicts(self, query: str, params: Tuple = ()) -> List[Dict[str, Any]]:
        try:
            rows = await self._with_connection(lambda conn: [dict(r) for r in conn.execute(query, params).fetchall()])
        except sqlite3.Error as e:
            logger.error(f"❌ Registry read failed: {e}")
            return []
        return rows

    # Migrations

    async def _migration_001_initial_schema(self) -> None:
        """Create schema_migrations and stage_runs."""
        await self.execute("""
            CREATE TABLE IF NOT EXISTS schema_migrations (
                version INTEGER PRIMARY KEY,
                applied_at TEXT NOT NULL,
                description TEXT
            )
        """)
        await self.execute("""
            CREATE TABLE IF NOT EXISTS stage_runs (
                id TEXT PRIMARY KEY,
                stage TEXT NOT NULL,
                config_hash TEXT NOT NULL,
                status TEXT NOT NULL DEFAULT 'running',
                started_at TEXT NOT NULL,
                finished_at TEXT,
                manifest_path TEXT
            )
        """)
        await self.execute("CREATE INDEX IF NOT EXISTS idx_stage_runs_stage ON stage_runs(stage, started_at DESC)")

    async def _migration_002_add_checkpoints(self) -> None:
        """Add chain_checkpoints for resumable fits."""
        await self.execute("""
            CREATE TABLE IF NOT EXISTS chain_checkpoints (
                run_id TEXT NOT NULL,
                coefficient INTEGER NOT NULL,
                path TEXT NOT NULL,
                checksum TEXT NOT NULL,
                created_at TEXT NOT NULL,
                PRIMARY KEY (run_id, coefficient),
                FOREIGN KEY (run_id) REFERENCES stage_runs(id) ON DELETE CASCADE
            )
        """)

    async def _migration_003_add_run_message(self) -> None:
        """Add a failure message column to stage_runs."""
        await self.execute("ALTER TABLE stage_runs ADD COLUMN message TEXT")

    # Stage runs

    async def start_run(self, stage: str, config_hash: str) -> str:
        run_id = uuid.uuid4().hex[:12]
        await self.execute(
            "INSERT INTO stage_runs (id, stage, config_hash, status, started_at) VALUES (?, ?, ?, 'running', ?)",
            (run_id, stage, config_hash, datetime.now().isoformat()),
        )
        return run_id

    async def finish_run(self, run_id: str, status: str, *, manifest_path: Optional[PathLike] = None,
                         message: Optional[str] = None) -> None:
        await self.execute(
            "UPDATE stage_runs SET status = ?, finished_at = ?, manifest_path = ?, message = ? WHERE id = ?",
            (status, datetime.now().isoformat(), str(manifest_path) if manifest_path else None, message, run_id),
        )

    async def get_run(self, run_id: str) -> Optional[Dict]:
        run = await self.fetch_dict("SELECT * FROM stage_runs WHERE id = ?", (run_id,))
        if run is not None:
            row = await self.fetch_dict(
                "SELECT COUNT(*) AS n FROM chain_checkpoints WHERE run_id = ?", (run_id,)
            )
            run["n_checkpoints"] = row["n"] if row else 0
        return run

    async def list_runs(self, stage: Optional[str] = None, limit: int = 50) -> List[Dict]:
        if stage:
            return await self.fetch_all_dicts(
                "SELECT * FROM stage_runs WHERE stage = ? ORDER BY started_at DESC LIMIT ?", (stage, limit)
            )
        return await self.fetch_all_dicts("SELECT * FROM stage_runs ORDER BY started_at DESC LIMIT ?", (limit,))

    # Chain checkpoints

    async def add_checkpoint(self, run_id: str, coefficient: int, path: PathLike) -> None:
        checksum = await asyncio.to_thread(file_checksum, path)
        await self.execute(
            "INSERT OR REPLACE INTO chain_checkpoints (run_id, coefficient, path, checksum, created_at) "
            "VALUES (?, ?, ?, ?, ?)",
            (run_id, int(coefficient), str(path), checksum, datetime.now().isoformat()),
        )

    async def resumable_checkpoints(self, config_hash: str) -> Dict[int, str]:
        """Coefficient -> posterior path from earlier fit runs under the same config whose file is intact."""
        rows = await self.fetch_all_dicts(
            "SELECT c.coefficient, c.path, c.checksum FROM chain_checkpoints c "
            "JOIN stage_runs r ON r.id = c.run_id "
            "WHERE r.stage = 'fit' AND r.config_hash = ? ORDER BY c.created_at",
            (config_hash,),
        )

        def _verify():
            intact = {}
            for row in rows:
                path = Path(row["path"])
                if path.exists() and file_checksum(path) == row["checksum"]:
                    intact[int(row["coefficient"])] = str(path)
            return intact

        intact = await asyncio.to_thread(_verify)
        if rows and len(intact) < len({r["coefficient"] for r in rows}):
            logger.warning("⚠️ Some chain checkpoints changed on disk and will be rerun")
        return intact
