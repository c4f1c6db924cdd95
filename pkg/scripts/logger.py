"""
Logging utilities for the range-mixing laboratory
CSV run logs: one registry row per experiment, one activity row per action
"""

import csv
import os
from datetime import datetime
from pathlib import Path


def default_log_dir():
    return os.getenv("RANGEMIX_LOG_DIR", "Logs")


class Logger:
    """Base logger class for CSV logging"""

    def __init__(self, log_dir=None):
        self.log_dir = Path(log_dir or default_log_dir())
        self.log_dir.mkdir(parents=True, exist_ok=True)

    def _ensure_file_exists(self, filename, headers):
        """Create log file with headers if it doesn't exist"""
        filepath = self.log_dir / filename
        if not filepath.exists():
            with open(filepath, 'w', newline='', encoding='utf-8') as f:
                writer = csv.writer(f)
                writer.writerow(headers)
        return filepath

    def _append_row(self, filename, row_data):
        """Append a row to the log file"""
        filepath = self.log_dir / filename
        with open(filepath, 'a', newline='', encoding='utf-8') as f:
            writer = csv.writer(f)
            writer.writerow(row_data)

    def _read_rows(self, filename):
        filepath = self.log_dir / filename
        with open(filepath, 'r', newline='', encoding='utf-8') as f:
            return list(csv.DictReader(f))


class ExperimentRegistry(Logger):
    """One row per experiment launched from the harness"""

    HEADERS = [
        'Experiment_ID', 'Kind', 'Created_Date', 'Config_Path',
        'Status', 'Code_Version', 'Notes'
    ]

    def __init__(self, log_dir=None):
        super().__init__(log_dir)
        self.filename = "experiment_registry.csv"
        self.filepath = self._ensure_file_exists(self.filename, self.HEADERS)

    def next_experiment_id(self):
        """Next free id of the form E001, E002, ..."""
        try:
            ids = [row['Experiment_ID'] for row in self._read_rows(self.filename)
                   if row['Experiment_ID'].startswith('E')]
            if not ids:
                return "E001"
            return f"E{max(int(i[1:]) for i in ids) + 1:03d}"
        except Exception as e:
            print(f"Error getting next experiment id: {e}")
            return "E001"

    def add_experiment(self, kind, config_path="", code_version="", status="Started", notes=""):
        """Register a new experiment and return its id"""
        experiment_id = self.next_experiment_id()
        row = [
            experiment_id,
            kind,
            datetime.now().strftime("%Y-%m-%d %H:%M:%S"),
            config_path,
            status,
            code_version,
            notes
        ]
        self._append_row(self.filename, row)
        print(f"✅ Experiment {experiment_id} ({kind}) logged to registry")
        return experiment_id

    def update_status(self, experiment_id, status, notes=""):
        """Status changes go to the activity log; registry rows are append-only"""
        RunActivityLog(self.log_dir).log_action(
            "Experiment Registry", experiment_id, f"Status Update: {status}", "Success", notes)


class RunActivityLog(Logger):
    """Logs every CLI command and harness action"""

    HEADERS = [
        'Timestamp', 'Component', 'Experiment_ID', 'Action',
        'Status', 'Details', 'Duration_Seconds'
    ]

    def __init__(self, log_dir=None):
        super().__init__(log_dir)
        self.filename = "run_activity.csv"
        self._ensure_file_exists(self.filename, self.HEADERS)

    def log_action(self, component, experiment_id, action, status, details="", duration=0):
        """Log one action"""
        row = [
            datetime.now().strftime("%Y-%m-%d %H:%M:%S"),
            component,
            experiment_id,
            action,
            status,
            details,
            duration
        ]
        self._append_row(self.filename, row)

    def rows(self):
        return self._read_rows(self.filename)


if __name__ == "__main__":
    print("Testing loggers...")

    registry = ExperimentRegistry()
    experiment_id = registry.add_experiment(kind="scaling", notes="Testing logger system")
    print(f"Registered experiment: {experiment_id}")

    activity = RunActivityLog()
    activity.log_action(
        component="Test Runner",
        experiment_id=experiment_id,
        action="Test Action",
        status="Success",
        details="This is a test"
    )

    print("\n✅ All loggers initialized and tested!")
    print(f"Check the {default_log_dir()}/ directory for CSV files")
