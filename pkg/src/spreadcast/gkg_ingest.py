"""GDELT GKG 2.1 ingestion: fetch, parse, filter, and daily aggregation.

A GKG record is one tab-delimited line of the public 15-minute CSV drops.  We
consume the publication timestamp, the source common name (outlet), the theme
list (World Bank and GDELT taxonomies, with per-mention repetition from the
enhanced field), locations, persons, organizations, and the V2GCAM block whose
``wc`` pair carries the article word count.

Filtered articles are mapped to bond-market trading days (09:00-17:30 local,
UTC+1): anything published after the close, overnight, on weekends or on
holidays rolls forward to the next session.  Aggregation sums mention counts
per category-qualified feature key within each trading day.
"""

from __future__ import annotations

import json
import logging
import shutil
import tempfile
import time as _time
import zipfile
from bisect import bisect_left
from dataclasses import dataclass, field
from datetime import date, datetime, time, timedelta
from pathlib import Path
from typing import Iterable, Iterator
from urllib.error import HTTPError, URLError
from urllib.request import urlopen

logger = logging.getLogger(__name__)

GKG_COLUMN_COUNT = 27
GKG_TIMESTAMP_FMT = "%Y%m%d%H%M%S"

# column indices of the GKG 2.1 layout (0-based)
_COL_DATE = 1
_COL_SOURCE = 3
_COL_THEMES = 7
_COL_THEMES_ENH = 8
_COL_LOCATIONS = 9
_COL_LOCATIONS_ENH = 10
_COL_PERSONS = 11
_COL_PERSONS_ENH = 12
_COL_ORGS = 13
_COL_ORGS_ENH = 14
_COL_GCAM = 17

# Italian generalist and financial outlets used as the default source filter
DEFAULT_OUTLETS = frozenset(
    {
        "ilsole24ore.com",
        "borsaitaliana.it",
        "italiaoggi.it",
        "milanofinanza.it",
        "ansa.it",
        "ilgiornale.it",
        "finanza.com",
        "wallstreetitalia.com",
        "repubblica.it",
        "investireoggi.it",
        "liberoquotidiano.it",
        "ilmessaggero.it",
        "ilfattoquotidiano.it",
        "corriere.it",
        "huffingtonpost.it",
        "lastampa.it",
        "trend-online.com",
        "teleborsa.it",
        "tradelink.it",
        "iltempo.it",
        "finanzaonline.com",
        "ilsussidiario.net",
    }
)

# World Bank umbrella themes marking bond-market-relevant articles.  The ids
# here match the synthetic fixtures; production configs override them.
DEFAULT_TARGET_WB_THEMES = frozenset(
    {
        "WB_MACROECONOMIC_VULNERABILITY_AND_DEBT",
        "WB_MACROECONOMIC_AND_STRUCTURAL_POLICIES",
    }
)


class GkgParseError(ValueError):
    """A GKG line violates the 2.1 layout."""


class OutOfCalendarError(ValueError):
    """A publication instant falls beyond the trading calendar."""


class GkgFetchError(RuntimeError):
    """Some 15-minute archives could not be retrieved."""

    def __init__(self, missing: list[datetime], fetched: list[Path]):
        self.missing = missing
        self.fetched = fetched
        slots = ", ".join(ts.strftime(GKG_TIMESTAMP_FMT) for ts in missing)
        super().__init__(f"failed to fetch {len(missing)} GKG slot(s): {slots}")


@dataclass
class GkgRecord:
    """One parsed GKG article row."""

    publish_instant: datetime
    outlet: str
    wb_themes: list[str] = field(default_factory=list)
    gdelt_themes: list[str] = field(default_factory=list)
    locations: list[str] = field(default_factory=list)
    persons: list[str] = field(default_factory=list)
    organizations: list[str] = field(default_factory=list)
    gcam_counts: dict[str, float] = field(default_factory=dict)
    word_count: int = 0

    def __post_init__(self) -> None:
        if self.word_count < 0:
            raise ValueError("word_count must be non-negative")
        for code, value in self.gcam_counts.items():
            if code.startswith("c"):
                if value < 0 or value != int(value):
                    raise ValueError(f"GCAM count dimension {code} must be a non-negative integer")
            elif not (value == value and abs(value) != float("inf")):
                raise ValueError(f"GCAM value dimension {code} must be finite")

    @property
    def timestamp_14(self) -> str:
        return self.publish_instant.strftime(GKG_TIMESTAMP_FMT)


@dataclass(frozen=True)
class ArticleFilterConfig:
    """Outlet, theme-focus and length thresholds for article retention."""

    allowed_outlets: frozenset[str] = DEFAULT_OUTLETS
    target_wb_themes: frozenset[str] = DEFAULT_TARGET_WB_THEMES
    min_theme_keywords: int = 4     # "more than three" keyword hits
    min_word_count: int = 100

    def __post_init__(self) -> None:
        if self.min_theme_keywords < 1:
            raise ValueError("min_theme_keywords must be >= 1")
        if self.min_word_count < 0:
            raise ValueError("min_word_count must be >= 0")
        if not self.allowed_outlets:
            raise ValueError("allowed_outlets must be non-empty")


@dataclass
class TradingCalendar:
    """Sorted trading days plus the local market session window."""

    trading_days: list[date]
    market_open: time = time(9, 0)
    market_close: time = time(17, 30)
    utc_offset_hours: int = 1

    def __post_init__(self) -> None:
        if not self.trading_days:
            raise ValueError("calendar has no trading days")
        for prev, cur in zip(self.trading_days, self.trading_days[1:]):
            if cur <= prev:
                raise ValueError("trading days must be strictly increasing")
        for d in self.trading_days:
            if d.weekday() >= 5:
                raise ValueError(f"{d} is a weekend day")
        if self.market_open >= self.market_close:
            raise ValueError("market_open must precede market_close")

    @classmethod
    def business_days(
        cls, start: date, end: date, holidays: Iterable[date] = (), **kwargs
    ) -> "TradingCalendar":
        """Monday-Friday days in [start, end], minus the given holidays."""
        skip = set(holidays)
        days = []
        d = start
        while d <= end:
            if d.weekday() < 5 and d not in skip:
                days.append(d)
            d += timedelta(days=1)
        return cls(trading_days=days, **kwargs)

    @classmethod
    def from_file(cls, path: str | Path, **kwargs) -> "TradingCalendar":
        """One ISO date per line; blank lines and '#' comments ignored."""
        days = []
        for line in Path(path).read_text().splitlines():
            line = line.strip()
            if line and not line.startswith("#"):
                days.append(date.fromisoformat(line))
        return cls(trading_days=days, **kwargs)


@dataclass
class DailyAggregate:
    """Per-trading-day article count and summed feature counts."""

    trading_day: date
    article_count: int = 0
    category_counts: dict[str, float] = field(default_factory=dict)


def _split_semicolon(text: str) -> list[str]:
    return [part for part in text.split(";") if part] if text else []


def _themes_with_repetition(enhanced: str, plain: str) -> list[str]:
    """Theme codes, one entry per mention (enhanced field carries offsets)."""
    if enhanced:
        return [block.split(",", 1)[0] for block in _split_semicolon(enhanced)]
    return _split_semicolon(plain)


def _location_codes(enhanced: str, plain: str) -> list[str]:
    blocks = _split_semicolon(enhanced) or _split_semicolon(plain)
    codes = []
    for block in blocks:
        parts = block.split("#")
        if len(parts) >= 3 and parts[2]:
            codes.append(parts[2])
    return codes


def _names_with_repetition(enhanced: str, plain: str) -> list[str]:
    if enhanced:
        return [block.rsplit(",", 1)[0] for block in _split_semicolon(enhanced)]
    return _split_semicolon(plain)


def parse_gkg_record(raw_line: str) -> GkgRecord:
    """Decode one tab-delimited GKG 2.1 line into a :class:`GkgRecord`.

    Unknown GCAM codes are retained verbatim; a malformed GCAM pair is logged
    and skipped without failing the record.
    """
    cols = raw_line.rstrip("\n").split("\t")
    if len(cols) != GKG_COLUMN_COUNT:
        raise GkgParseError(
            f"expected {GKG_COLUMN_COUNT} tab-delimited columns, got {len(cols)}"
        )
    try:
        instant = datetime.strptime(cols[_COL_DATE], GKG_TIMESTAMP_FMT)
    except ValueError as exc:
        raise GkgParseError(f"bad timestamp in column {_COL_DATE}: {cols[_COL_DATE]!r}") from exc

    themes = _themes_with_repetition(cols[_COL_THEMES_ENH], cols[_COL_THEMES])
    wb = [t for t in themes if t.startswith("WB_")]
    gdelt = [t for t in themes if not t.startswith("WB_")]

    word_count = 0
    gcam: dict[str, float] = {}
    if cols[_COL_GCAM]:
        for pair in cols[_COL_GCAM].split(","):
            code, sep, value = pair.partition(":")
            if not sep or not code:
                logger.warning("skipping malformed GCAM pair %r", pair)
                continue
            try:
                num = float(value)
            except ValueError:
                logger.warning("skipping malformed GCAM pair %r", pair)
                continue
            if code == "wc":
                word_count = int(num)
            elif code.startswith("c"):
                gcam[code] = int(num)
            else:
                gcam[code] = num

    return GkgRecord(
        publish_instant=instant,
        outlet=cols[_COL_SOURCE],
        wb_themes=wb,
        gdelt_themes=gdelt,
        locations=_location_codes(cols[_COL_LOCATIONS_ENH], cols[_COL_LOCATIONS]),
        persons=_names_with_repetition(cols[_COL_PERSONS_ENH], cols[_COL_PERSONS]),
        organizations=_names_with_repetition(cols[_COL_ORGS_ENH], cols[_COL_ORGS]),
        gcam_counts=gcam,
        word_count=word_count,
    )


def serialize_gkg_record(record: GkgRecord) -> str:
    """Emit a GKG 2.1 line carrying every field this module consumes.

    Mention offsets are not retained by parsing, so synthetic zero offsets are
    written; re-parsing the output reproduces the record exactly.
    """
    cols = [""] * GKG_COLUMN_COUNT
    cols[0] = record.timestamp_14 + "-0"
    cols[_COL_DATE] = record.timestamp_14
    cols[_COL_SOURCE] = record.outlet
    themes = record.wb_themes + record.gdelt_themes
    cols[_COL_THEMES] = ";".join(themes)
    cols[_COL_THEMES_ENH] = ";".join(f"{t},0" for t in themes)
    cols[_COL_LOCATIONS_ENH] = ";".join(f"1#{c}#{c}##0#0#0#0" for c in record.locations)
    cols[_COL_PERSONS_ENH] = ";".join(f"{p},0" for p in record.persons)
    cols[_COL_ORGS_ENH] = ";".join(f"o,0".replace("o", o, 1) for o in record.organizations)
    pairs = [f"wc:{record.word_count}"]
    for code, value in record.gcam_counts.items():
        pairs.append(f"{code}:{int(value)}" if code.startswith("c") else f"{code}:{value}")
    cols[_COL_GCAM] = ",".join(pairs)
    return "\t".join(cols)


def theme_keyword_hits(record: GkgRecord, targets: frozenset[str]) -> int:
    """Mentions of target WB themes, counted with repetition."""
    return sum(1 for t in record.wb_themes if t in targets)


def filter_articles(
    records: Iterable[GkgRecord], cfg: ArticleFilterConfig
) -> Iterator[GkgRecord]:
    """Keep articles from allowed outlets with enough target-theme focus and length."""
    for rec in records:
        if rec.outlet not in cfg.allowed_outlets:
            continue
        if rec.word_count < cfg.min_word_count:
            continue
        if theme_keyword_hits(rec, cfg.target_wb_themes) < cfg.min_theme_keywords:
            continue
        yield rec


def assign_trading_day(publish_instant: datetime, cal: TradingCalendar) -> date:
    """Map a UTC publication instant to the trading day it informs.

    The article attaches to the earliest trading session whose close is not
    yet past in local time: in-session articles map to that day, after-close /
    overnight ones to the next session, weekend and holiday ones roll forward.
    """
    local = publish_instant + timedelta(hours=cal.utc_offset_hours)
    days = cal.trading_days
    idx = bisect_left(days, local.date())
    if idx < len(days) and days[idx] == local.date() and local.time() > cal.market_close:
        idx += 1
    if idx >= len(days):
        raise OutOfCalendarError(
            f"{publish_instant.isoformat()} falls after the last trading day {days[-1]}"
        )
    return days[idx]


def _feature_items(record: GkgRecord) -> Iterator[tuple[str, float]]:
    for t in record.wb_themes:
        yield f"wb:{t}", 1.0
    for t in record.gdelt_themes:
        yield f"gdelt:{t}", 1.0
    for c in record.locations:
        yield f"loc:{c}", 1.0
    for p in record.persons:
        yield f"person:{p}", 1.0
    for o in record.organizations:
        yield f"org:{o}", 1.0
    for code, value in record.gcam_counts.items():
        yield f"gcam:{code}", float(value)


def aggregate_daily(
    records: Iterable[GkgRecord], cal: TradingCalendar
) -> list[DailyAggregate]:
    """Sum feature counts per trading day; zero-article days are materialized."""
    by_day: dict[date, DailyAggregate] = {
        d: DailyAggregate(trading_day=d) for d in cal.trading_days
    }
    for rec in records:
        day = assign_trading_day(rec.publish_instant, cal)
        agg = by_day[day]
        agg.article_count += 1
        counts = agg.category_counts
        for key, value in _feature_items(rec):
            counts[key] = counts.get(key, 0.0) + value
    return [by_day[d] for d in cal.trading_days]


def merge_aggregates(parts: Iterable[list[DailyAggregate]]) -> list[DailyAggregate]:
    """Associative/commutative merge of per-file partial aggregates."""
    merged: dict[date, DailyAggregate] = {}
    for part in parts:
        for agg in part:
            into = merged.setdefault(agg.trading_day, DailyAggregate(agg.trading_day))
            into.article_count += agg.article_count
            for key, value in agg.category_counts.items():
                into.category_counts[key] = into.category_counts.get(key, 0.0) + value
    return [merged[d] for d in sorted(merged)]


FEATURE_CATEGORIES = {
    "wb": "WB-theme",
    "gdelt": "GDELT-theme",
    "gcam": "GCAM",
    "loc": "location",
    "person": "person",
    "org": "organization",
}


def feature_metadata(keys: Iterable[str]) -> dict[str, dict[str, str]]:
    """Category (and GCAM dictionary) metadata for feature keys."""
    meta = {}
    for key in keys:
        prefix, _, rest = key.partition(":")
        entry = {"category": FEATURE_CATEGORIES[prefix]}
        if prefix == "gcam":
            entry["dictionary"] = rest.split(".", 1)[0]
        meta[key] = entry
    return meta


def write_daily_aggregates(aggs: list[DailyAggregate], out_dir: str | Path) -> dict:
    """Write the columnar daily CSV and its JSON metadata sidecar.

    Cells are empty (missing) on days where a feature was never mentioned;
    zero-article days keep article_count=0 with all feature cells empty.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    keys = sorted({k for agg in aggs for k in agg.category_counts})
    csv_path = out / "daily_features.csv"
    with csv_path.open("w", encoding="utf-8", newline="") as fh:
        header = ["trading_day", "article_count"] + keys
        fh.write(",".join(_csv_quote(h) for h in header) + "\n")
        for agg in aggs:
            row = [agg.trading_day.isoformat(), str(agg.article_count)]
            for key in keys:
                value = agg.category_counts.get(key)
                row.append("" if value is None else _format_count(value))
            fh.write(",".join(row) + "\n")
    meta_path = out / "feature_metadata.json"
    meta_path.write_text(json.dumps(feature_metadata(keys), indent=2, sort_keys=True) + "\n")
    return {"csv": str(csv_path), "metadata": str(meta_path)}


def _csv_quote(text: str) -> str:
    if "," in text or '"' in text:
        return '"' + text.replace('"', '""') + '"'
    return text


def _format_count(value: float) -> str:
    return str(int(value)) if value == int(value) else repr(value)


def gkg_slot_timestamps(start: datetime, end: datetime) -> list[datetime]:
    """The 15-minute archive slots covering [start, end).

    The start is floored to its covering slot; a degenerate range maps to that
    single slot.
    """
    if end < start:
        raise ValueError("empty date range")
    slot = start.replace(minute=start.minute - start.minute % 15, second=0, microsecond=0)
    stop = max(end, slot + timedelta(minutes=15))
    slots = []
    while slot < stop:
        slots.append(slot)
        slot += timedelta(minutes=15)
    return slots


def fetch_gkg_files(
    base_url: str,
    start: datetime,
    end: datetime,
    dest_dir: str | Path,
    retries: int = 3,
    backoff: float = 0.25,
    timeout: float = 30.0,
) -> list[Path]:
    """Download (or reuse cached) 15-minute GKG archives for [start, end).

    Zip archives are expanded to their CSV member in ``dest_dir``; re-running
    skips anything already extracted.  Transient failures retry with bounded
    exponential backoff; slots still missing afterwards raise
    :class:`GkgFetchError` carrying the successfully fetched paths.  Corrupt
    archives are skipped with a warning.
    """
    dest = Path(dest_dir)
    dest.mkdir(parents=True, exist_ok=True)
    fetched: list[Path] = []
    missing: list[datetime] = []
    for slot in gkg_slot_timestamps(start, end):
        stamp = slot.strftime(GKG_TIMESTAMP_FMT)
        csv_path = dest / f"{stamp}.gkg.csv"
        if csv_path.exists():
            fetched.append(csv_path)
            continue
        url = f"{base_url.rstrip('/')}/{stamp}.gkg.csv.zip"
        blob = _download_with_retry(url, retries, backoff, timeout)
        if blob is None:
            missing.append(slot)
            continue
        try:
            _extract_archive(blob, csv_path)
        except zipfile.BadZipFile:
            logger.warning("corrupt GKG archive for slot %s; skipped", stamp)
            continue
        fetched.append(csv_path)
    if missing:
        raise GkgFetchError(missing=missing, fetched=fetched)
    return fetched


def _download_with_retry(url: str, retries: int, backoff: float, timeout: float) -> bytes | None:
    delay = backoff
    for attempt in range(retries + 1):
        try:
            with urlopen(url, timeout=timeout) as resp:
                return resp.read()
        except HTTPError as exc:
            if exc.code == 404:
                logger.warning("GKG archive not found: %s", url)
                return None
            logger.warning("HTTP %s fetching %s (attempt %d)", exc.code, url, attempt + 1)
        except (URLError, OSError) as exc:
            logger.warning("error fetching %s (attempt %d): %s", url, attempt + 1, exc)
        if attempt < retries:
            _time.sleep(delay)
            delay *= 2
    return None


def _extract_archive(blob: bytes, csv_path: Path) -> None:
    with tempfile.TemporaryDirectory() as tmp:
        tmp_zip = Path(tmp) / "archive.zip"
        tmp_zip.write_bytes(blob)
        with zipfile.ZipFile(tmp_zip) as zf:
            members = [m for m in zf.namelist() if m.endswith(".csv")]
            if not members:
                raise zipfile.BadZipFile("no CSV member in archive")
            with zf.open(members[0]) as src, csv_path.open("wb") as dst:
                shutil.copyfileobj(src, dst)


def parse_gkg_file(path: str | Path, strict: bool = True) -> Iterator[GkgRecord]:
    """Parse every line of a GKG CSV file (optionally zip-compressed)."""
    path = Path(path)
    if path.suffix == ".zip":
        with zipfile.ZipFile(path) as zf:
            member = next(m for m in zf.namelist() if m.endswith(".csv"))
            lines = zf.read(member).decode("utf-8", errors="replace").splitlines()
    else:
        lines = path.read_text(encoding="utf-8", errors="replace").splitlines()
    for lineno, line in enumerate(lines, start=1):
        if not line.strip():
            continue
        try:
            yield parse_gkg_record(line)
        except GkgParseError:
            if strict:
                raise
            logger.warning("%s:%d: unparseable GKG line skipped", path, lineno)
