"""
LogManager - Process-wide logging for pipeline runs

Two sinks: a human-readable rotating application.log (mirrored to the
console) and operations.jsonl, one JSON object per pipeline event, stamped
with the id of the active run.
"""
import json
import logging
import os
import time
import traceback
import uuid
from dataclasses import asdict, dataclass, field
from datetime import datetime
from logging.handlers import RotatingFileHandler
from typing import Any, Dict, Iterable, Iterator, List, Optional

from tqdm import tqdm

APP_LOG_BYTES = 10 * 1024 * 1024
APP_LOG_BACKUPS = 3
LINE_FORMAT = '%(asctime)s - %(name)s - %(levelname)s - %(message)s'


def progress(iterable: Iterable, desc: str, total: Optional[int] = None) -> Iterable:
    """Epoch progress bar; silent when IDPROXY_QUIET=1."""
    return tqdm(iterable, desc=desc, total=total, leave=False,
                disable=os.getenv('IDPROXY_QUIET') == '1')


@dataclass
class LogEntry:
    """One line of operations.jsonl."""
    timestamp: float
    log_level: str
    category: str
    operation_id: str
    run_id: Optional[str]
    message: str
    details: Dict[str, Any] = field(default_factory=dict)

    def to_dict(self) -> Dict:
        return asdict(self)

    @staticmethod
    def from_dict(data: Dict) -> 'LogEntry':
        return LogEntry(timestamp=data['timestamp'], log_level=data['log_level'],
                        category=data['category'], operation_id=data['operation_id'],
                        run_id=data.get('run_id'), message=data['message'],
                        details=data.get('details') or {})


class LogManager:
    """Singleton; every module calls LogManager() and gets the same sinks."""

    _instance = None

    def __new__(cls):
        if cls._instance is None:
            instance = super().__new__(cls)
            instance._initialized = False
            cls._instance = instance
        return cls._instance

    def __init__(self):
        if self._initialized:
            return
        self.logger = logging.getLogger('idproxy')
        self.logger.setLevel(logging.DEBUG)
        self.logger.propagate = False
        self.current_run_id: Optional[str] = None
        default_dir = os.path.join(os.path.expanduser('~'), '.idproxy', 'logs')
        self.configure(os.getenv('IDPROXY_LOG_DIR', default_dir))
        self._initialized = True

    def configure(self, log_dir: str):
        """Point both sinks at log_dir (the CLI uses <workdir>/logs)."""
        os.makedirs(log_dir, exist_ok=True)
        self.log_dir = log_dir
        self.app_log_path = os.path.join(log_dir, 'application.log')
        self.operations_log_path = os.path.join(log_dir, 'operations.jsonl')

        for handler in list(self.logger.handlers):
            handler.close()
            self.logger.removeHandler(handler)

        formatter = logging.Formatter(LINE_FORMAT, datefmt='%Y-%m-%d %H:%M:%S')
        file_handler = RotatingFileHandler(self.app_log_path, maxBytes=APP_LOG_BYTES,
                                           backupCount=APP_LOG_BACKUPS, encoding='utf-8')
        file_handler.setLevel(logging.DEBUG)
        quiet = os.getenv('IDPROXY_QUIET') == '1'
        console = logging.StreamHandler()
        console.setLevel(logging.WARNING if quiet else logging.INFO)
        for handler in (file_handler, console):
            handler.setFormatter(formatter)
            self.logger.addHandler(handler)

    def set_run_id(self, run_id: Optional[str]):
        """Stamp subsequent entries with run_id (None clears it)."""
        self.current_run_id = run_id
        if run_id:
            self.logger.info(f"Run started: {run_id}")

    @staticmethod
    def _new_operation_id() -> str:
        return f"op_{datetime.now().strftime('%Y%m%d_%H%M%S')}_{uuid.uuid4().hex[:8]}"

    def _record(self, level: str, category: str, message: str,
                details: Optional[Dict]) -> str:
        entry = LogEntry(timestamp=time.time(), log_level=level, category=category,
                         operation_id=self._new_operation_id(), run_id=self.current_run_id,
                         message=message, details=details or {})
        try:
            with open(self.operations_log_path, 'a', encoding='utf-8') as f:
                f.write(json.dumps(entry.to_dict(), ensure_ascii=False, default=str) + '\n')
        except OSError as e:
            self.logger.error(f"operations.jsonl not writable: {e}")
        return entry.operation_id

    def log_info(self, message: str, category: str = 'PIPELINE',
                 details: Optional[Dict] = None) -> str:
        self.logger.info(f"{category}: {message}")
        return self._record('INFO', category, message, details)

    def log_warning(self, message: str, category: str = 'PIPELINE',
                    details: Optional[Dict] = None) -> str:
        self.logger.warning(f"{category}: {message}")
        return self._record('WARNING', category, message, details)

    def log_epoch(self, stage: str, epoch: int, loss: float,
                  details: Optional[Dict] = None) -> str:
        """
        Record the mean loss of one training epoch.

        Args:
            stage: 'stage1', 'stage2', 'ranker/<variant>' or 'static_mapper'
            epoch: 1-based epoch number
            loss: Mean loss over the epoch
            details: Extra fields merged into the entry

        Returns:
            Operation id of the entry
        """
        payload = {**(details or {}), 'stage': stage, 'epoch': epoch, 'loss': float(loss)}
        message = f"{stage} epoch {epoch} loss={loss:.6f}"
        self.logger.debug(f"TRAINING: {message}")
        return self._record('INFO', 'TRAINING', message, payload)

    def log_artifact(self, operation_type: str, name: str, success: bool,
                     details: Optional[Dict] = None) -> str:
        """Record a create, load or verify of a registered artifact."""
        payload = {**(details or {}), 'artifact': name,
                   'operation_type': operation_type, 'success': success}
        message = f"Artifact {operation_type}: {name} - {'ok' if success else 'FAILED'}"
        self.logger.log(logging.INFO if success else logging.ERROR, message)
        return self._record('INFO' if success else 'ERROR', 'ARTIFACT', message, payload)

    def log_evaluation(self, message: str, metrics: Dict[str, Any]) -> str:
        self.logger.info(f"EVALUATION: {message}")
        return self._record('INFO', 'EVALUATION', message, dict(metrics))

    def log_error(self, error: Exception, context: str, details: Optional[Dict] = None) -> str:
        """
        Record an exception with its traceback.

        Args:
            error: The exception
            context: Subcommand or stage that raised it
            details: Extra fields merged into the entry

        Returns:
            Operation id of the entry
        """
        payload = {**(details or {}),
                   'error_type': type(error).__name__,
                   'error_message': str(error),
                   'traceback': ''.join(traceback.format_exception(type(error), error,
                                                                   error.__traceback__))}
        self.logger.error(f"{context}: {type(error).__name__}: {error}")
        return self._record('ERROR', 'ERROR', f"{context}: {error}", payload)

    def _read_entries(self) -> Iterator[LogEntry]:
        if not os.path.exists(self.operations_log_path):
            return
        with open(self.operations_log_path, 'r', encoding='utf-8') as f:
            for line in f:
                try:
                    yield LogEntry.from_dict(json.loads(line))
                except (ValueError, KeyError):
                    continue

    def get_recent_logs(self, count: int = 100,
                        category: Optional[str] = None) -> List[LogEntry]:
        """Newest first, optionally restricted to one category."""
        matching = [e for e in self._read_entries() if category is None or e.category == category]
        return matching[::-1][:count]

    def get_logs_by_run(self, run_id: str) -> List[LogEntry]:
        """Entries stamped with run_id, oldest first."""
        return sorted((e for e in self._read_entries() if e.run_id == run_id),
                      key=lambda e: e.timestamp)
