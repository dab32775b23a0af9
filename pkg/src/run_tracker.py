"""
RunTracker - Tracks pipeline runs and records reproducibility manifests
"""
import json
import os
import platform
import time
import uuid
from datetime import datetime
from typing import Any, Dict, List, Optional

import psutil

from log_manager import LogManager


def host_fingerprint() -> Dict[str, Any]:
    """Hardware the run executed on; throughput numbers are only comparable on equal hosts."""
    memory = psutil.virtual_memory()
    process = psutil.Process(os.getpid())
    return {
        'platform': platform.platform(),
        'python': platform.python_version(),
        'cpu_logical': psutil.cpu_count(logical=True),
        'cpu_physical': psutil.cpu_count(logical=False),
        'memory_total_mb': round(memory.total / (1024 * 1024), 1),
        'rss_mb': round(process.memory_info().rss / (1024 * 1024), 1),
    }


class RunSession:
    """Represents a single CLI subcommand run."""

    def __init__(self, run_id: str, command: str, config_hash: str, seed: int,
                 started_at: float, arguments: Optional[Dict] = None):
        self.run_id = run_id
        self.command = command
        self.config_hash = config_hash
        self.seed = seed
        self.started_at = started_at
        self.finished_at: Optional[float] = None
        self.status = 'RUNNING'
        self.arguments = arguments or {}
        self.artifacts: List[str] = []
        self.metrics: Dict[str, Any] = {}
        self.runtime_seconds: Optional[float] = None
        self.error: Optional[str] = None
        self.host = host_fingerprint()

    def to_dict(self) -> Dict:
        """Convert to dictionary for JSON serialization."""
        return {
            'run_id': self.run_id,
            'command': self.command,
            'config_hash': self.config_hash,
            'seed': self.seed,
            'started_at': self.started_at,
            'finished_at': self.finished_at,
            'status': self.status,
            'arguments': self.arguments,
            'artifacts': self.artifacts,
            'metrics': self.metrics,
            'runtime_seconds': self.runtime_seconds,
            'error': self.error,
            'host': self.host,
        }

    @staticmethod
    def from_dict(data: Dict) -> 'RunSession':
        """Create RunSession from dictionary."""
        session = RunSession(
            run_id=data['run_id'],
            command=data['command'],
            config_hash=data.get('config_hash', ''),
            seed=data.get('seed', 0),
            started_at=data['started_at'],
            arguments=data.get('arguments', {}),
        )
        session.finished_at = data.get('finished_at')
        session.status = data.get('status', 'UNKNOWN')
        session.artifacts = data.get('artifacts', [])
        session.metrics = data.get('metrics', {})
        session.runtime_seconds = data.get('runtime_seconds')
        session.error = data.get('error')
        session.host = data.get('host', {})
        return session


class RunTracker:
    """Opens, closes and persists run sessions under <workdir>/manifests."""

    MAX_SESSIONS = 20  # Keep last 20 runs in runs.json

    def __init__(self, workdir: str):
        self.manifest_dir = os.path.join(workdir, 'manifests')
        os.makedirs(self.manifest_dir, exist_ok=True)
        self.sessions_file = os.path.join(self.manifest_dir, 'runs.json')
        self.sessions: List[RunSession] = self._load_sessions()
        self.current_session: Optional[RunSession] = None
        self.log_manager = LogManager()

    def _load_sessions(self) -> List[RunSession]:
        if not os.path.exists(self.sessions_file):
            return []
        try:
            with open(self.sessions_file, 'r', encoding='utf-8') as f:
                return [RunSession.from_dict(s) for s in json.load(f)]
        except (OSError, ValueError, KeyError) as e:
            LogManager().log_warning(f"Ignoring unreadable run history: {e}", category='ARTIFACT')
            return []

    def _save_sessions(self):
        self.sessions = self.sessions[-self.MAX_SESSIONS:]
        with open(self.sessions_file, 'w', encoding='utf-8') as f:
            json.dump([s.to_dict() for s in self.sessions], f, indent=2)

    def start(self, command: str, config_hash: str, seed: int,
              arguments: Optional[Dict] = None) -> RunSession:
        """
        Open a session for a subcommand and stamp its id on the log.

        Args:
            command: Subcommand name
            config_hash: Hash of the effective run configuration
            seed: Effective run seed
            arguments: Parsed CLI arguments worth recording

        Returns:
            The new RunSession
        """
        now = time.time()
        run_id = f"run_{datetime.fromtimestamp(now).strftime('%Y%m%d_%H%M%S')}_{uuid.uuid4().hex[:6]}"
        self.current_session = RunSession(run_id, command, config_hash, seed, now, arguments)
        self.log_manager.set_run_id(run_id)
        self.log_manager.log_info(f"{command} started", details={'config_hash': config_hash, 'seed': seed})
        return self.current_session

    def record_artifact(self, name: str):
        if self.current_session and name not in self.current_session.artifacts:
            self.current_session.artifacts.append(name)

    def record_metrics(self, metrics: Dict[str, Any]):
        if self.current_session:
            self.current_session.metrics.update(metrics)

    def finish(self, status: str = 'SUCCESS', error: Optional[Exception] = None) -> Optional[str]:
        """
        Close the current session and write <command>.json plus runs.json.

        Returns:
            Path of the written manifest, or None when no session is open
        """
        session = self.current_session
        if session is None:
            return None
        session.finished_at = time.time()
        session.runtime_seconds = round(session.finished_at - session.started_at, 3)
        session.status = status
        session.host = host_fingerprint()
        if error is not None:
            session.error = f"{type(error).__name__}: {error}"

        manifest_path = os.path.join(self.manifest_dir, f"{session.command}.json")
        with open(manifest_path, 'w', encoding='utf-8') as f:
            json.dump(session.to_dict(), f, indent=2)
        self.sessions.append(session)
        self._save_sessions()
        self.log_manager.log_info(f"{session.command} finished: {status}",
                                  details={'runtime_seconds': session.runtime_seconds})
        self.log_manager.set_run_id(None)
        self.current_session = None
        return manifest_path

    def get_run_history(self, count: int = 5) -> List[RunSession]:
        """Most recent runs first."""
        return list(reversed(self.sessions[-count:]))
