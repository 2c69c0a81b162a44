from datetime import datetime, timezone

TIMESTAMP_FIELDS = ("created_at", "updated_at")


def add_timestamps(doc: dict, is_update: bool = False) -> dict:
    now = datetime.now(timezone.utc).isoformat()
    if not is_update:
        doc["created_at"] = now
    doc["updated_at"] = now
    return doc


def strip_timestamps(doc: dict) -> dict:
    """Copy of a report without its timestamps, for reproducibility comparisons."""
    return {k: v for k, v in doc.items() if k not in TIMESTAMP_FIELDS}
