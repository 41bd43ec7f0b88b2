"""
Report logger - saves loss breakdowns, iteration stats and metric tables to CSV/JSON
"""
import csv
import json


class CsvReport:
    def __init__(self, filename, fieldnames):
        self.filename = filename
        self.fieldnames = list(fieldnames)
        self.rows = []

    def log_row(self, row):
        """
        Log one report row

        Args:
            row: Dict keyed by the report's field names; missing fields are left blank
        """
        unknown = set(row) - set(self.fieldnames)
        if unknown:
            raise KeyError(f"unexpected report fields: {sorted(unknown)}")
        self.rows.append({name: _format(row.get(name, '')) for name in self.fieldnames})

    def log_rows(self, rows):
        for row in rows:
            self.log_row(row)

    def save(self):
        """Save all logged rows to CSV (header is written even when there are no rows)"""
        with open(self.filename, 'w', newline='', encoding='utf-8') as csvfile:
            writer = csv.DictWriter(csvfile, fieldnames=self.fieldnames)
            writer.writeheader()
            writer.writerows(self.rows)

        return len(self.rows)


def _format(value):
    if isinstance(value, float):
        return repr(round(value, 10))
    return value


def save_json(filename, payload):
    """Write JSON with sorted keys so equal payloads give equal bytes"""
    with open(filename, 'w', encoding='utf-8') as f:
        json.dump(payload, f, indent=2, sort_keys=True)
    return filename


def load_json(filename):
    with open(filename, 'r', encoding='utf-8') as f:
        return json.load(f)
