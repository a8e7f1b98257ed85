"""
Stroke Onset Anchoring from Clinical Notes
Rule cascade over note text: acute trigger with negation/history guards,
then absolute clock times, then relative expressions, then the note time
as a proxy. All clock arithmetic is UTC.
"""

import json
import logging
import math
import os
import re
from dataclasses import dataclass, field
from enum import Enum
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import pandas as pd

logger = logging.getLogger(__name__)

DEFAULT_LEXICON = os.path.join(os.path.dirname(os.path.abspath(__file__)), '..', 'data', 'onset_lexicon.txt')
GUARD_TOKENS = 5
FUTURE_TOLERANCE_S = 86400.0
DAY = 86400.0

NUMBER_WORDS = {
    'a': 1, 'an': 1, 'one': 1, 'two': 2, 'three': 3, 'four': 4, 'five': 5, 'six': 6,
    'seven': 7, 'eight': 8, 'nine': 9, 'ten': 10, 'eleven': 11, 'twelve': 12,
}

TOKEN = re.compile(r"[a-z0-9/']+")
SENTENCE_BREAK = re.compile(r"(?<=[.!?;])\s+(?=[A-Z0-9])|\n+")
CLAUSE_BREAK = re.compile(r"[,.;:!?\n]")
CLOCK = re.compile(r"\b(?P<h>\d{1,2}):(?P<m>\d{2})(?:\s*(?P<ampm>[ap])\.?m\b\.?)?", re.IGNORECASE)
HOUR_AMPM = re.compile(r"\b(?P<h>\d{1,2})\s*(?P<ampm>[ap])\.?m\b\.?", re.IGNORECASE)
DATE_ISO = re.compile(r"\b(?P<y>\d{4})-(?P<mo>\d{2})-(?P<d>\d{2})\b")
DATE_US = re.compile(r"\b(?P<mo>\d{1,2})/(?P<d>\d{1,2})/(?P<y>\d{4})\b")
YESTERDAY = re.compile(r"\byesterday\b", re.IGNORECASE)
RELATIVE = re.compile(
    r"\b(?P<n>\d+(?:\.\d+)?|an?|one|two|three|four|five|six|seven|eight|nine|ten|eleven|twelve)"
    r"\s*(?P<unit>hours?|hrs?|minutes?|mins?|days?)\s+(?:ago|prior|earlier)\b",
    re.IGNORECASE)


class ResolutionKind(Enum):
    EXPLICIT = 'Explicit'
    PROXY = 'Proxy'
    NON_EVENT = 'NonEvent'


class Confidence(Enum):
    HIGH = 'High'
    MEDIUM = 'Medium'
    LOW = 'Low'


@dataclass
class NoteRecord:
    note_id: str
    patient_id: str
    note_time: float
    text: str

    def __post_init__(self):
        self.note_time = float(self.note_time)
        if not math.isfinite(self.note_time):
            raise ValueError(f"note {self.note_id} has no valid note_time")


@dataclass
class OnsetResolution:
    kind: ResolutionKind
    ts: Optional[float] = None
    confidence: Optional[Confidence] = None
    matched_span: Optional[Tuple[int, int]] = None
    note_id: str = ""
    patient_id: str = ""

    @property
    def is_onset(self) -> bool:
        return self.kind is not ResolutionKind.NON_EVENT


@dataclass
class Anchor:
    minutes: int
    day_offset: int
    absolute: bool


@dataclass
class Lexicon:
    """Editable rule tables loaded from a sectioned text file"""

    triggers: Tuple[str, ...]
    guards: Tuple[str, ...]
    post_guards: Tuple[str, ...] = ()
    guard_exceptions: Tuple[str, ...] = ()
    anchors: Dict[str, Anchor] = field(default_factory=dict)
    version: str = "1"

    @classmethod
    def load(cls, path: str = DEFAULT_LEXICON) -> "Lexicon":
        sections: Dict[str, List[str]] = {}
        current = None
        with open(path, 'r', encoding='utf-8') as f:
            for raw in f:
                line = raw.strip()
                if not line or line.startswith('#'):
                    continue
                if line.startswith('[') and line.endswith(']'):
                    current = line[1:-1].strip().lower()
                    sections.setdefault(current, [])
                    continue
                if current is None:
                    raise ValueError(f"{path}: entry outside a section: {line!r}")
                sections[current].append(line.lower())

        meta = dict(_split_entry(entry) for entry in sections.get('meta', []))
        anchors = {}
        for entry in sections.get('anchors', []):
            phrase, spec = _split_entry(entry)
            clock, offset, kind = spec.split()
            hours, minutes = clock.split(':')
            anchors[phrase] = Anchor(int(hours) * 60 + int(minutes), int(offset), kind == 'absolute')

        def by_length(items):
            return tuple(sorted(set(items), key=lambda s: (-len(s), s)))

        return cls(
            triggers=by_length(sections.get('triggers', [])),
            guards=by_length(sections.get('guards', [])),
            post_guards=by_length(sections.get('post_guards', [])),
            guard_exceptions=by_length(sections.get('guard_exceptions', [])),
            anchors=anchors,
            version=meta.get('version', '1'),
        )

    def trigger_pattern(self) -> re.Pattern:
        return _phrase_pattern(self.triggers)

    def anchor_pattern(self) -> re.Pattern:
        return _phrase_pattern(sorted(self.anchors, key=lambda s: (-len(s), s)))


def _split_entry(entry: str) -> Tuple[str, str]:
    key, _, value = entry.partition('=')
    return key.strip(), value.strip()


def _phrase_pattern(phrases: Sequence[str]) -> re.Pattern:
    if not phrases:
        return re.compile(r"(?!x)x")
    alternatives = '|'.join(re.escape(p) for p in phrases)
    return re.compile(rf"(?<![a-z0-9])(?:{alternatives})(?![a-z0-9])", re.IGNORECASE)


_default_lexicon: Optional[Lexicon] = None


def default_lexicon() -> Lexicon:
    global _default_lexicon
    if _default_lexicon is None:
        _default_lexicon = Lexicon.load()
    return _default_lexicon


def _contains_phrase(tokens: List[str], phrase: str) -> bool:
    words = phrase.split()
    return any(tokens[i:i + len(words)] == words for i in range(len(tokens) - len(words) + 1))


def _strip_exceptions(tokens: List[str], exceptions: Sequence[str]) -> List[str]:
    for phrase in exceptions:
        words = phrase.split()
        i = 0
        while i <= len(tokens) - len(words):
            if tokens[i:i + len(words)] == words:
                del tokens[i:i + len(words)]
            else:
                i += 1
    return tokens


def is_guarded(text: str, start: int, end: int, lexicon: Lexicon) -> bool:
    """History/negation cue in the 5 tokens before, or a post-guard in the 5 after, within the clause"""
    lowered = text.lower()
    before = lowered[:start]
    breaks = list(CLAUSE_BREAK.finditer(before))
    clause_before = before[breaks[-1].end():] if breaks else before
    window = _strip_exceptions(TOKEN.findall(clause_before), lexicon.guard_exceptions)[-GUARD_TOKENS:]
    if any(_contains_phrase(window, g) for g in lexicon.guards):
        return True

    after = lowered[end:]
    stop = CLAUSE_BREAK.search(after)
    clause_after = after[:stop.start()] if stop else after
    window = TOKEN.findall(clause_after)[:GUARD_TOKENS]
    return any(_contains_phrase(window, g) for g in lexicon.post_guards)


def _sentence_bounds(text: str, position: int) -> Tuple[int, int]:
    start, end = 0, len(text)
    for match in SENTENCE_BREAK.finditer(text):
        if match.end() <= position:
            start = match.end()
        elif match.start() >= position:
            end = match.start()
            break
    return start, end


def _day_start(epoch: float) -> float:
    return math.floor(epoch / DAY) * DAY


def _clock_minutes(hour: int, minute: int, ampm: Optional[str]) -> Optional[int]:
    if ampm:
        if not 1 <= hour <= 12:
            return None
        hour = hour % 12 + (12 if ampm.lower() == 'p' else 0)
    if hour > 23 or minute > 59:
        return None
    return hour * 60 + minute


def _sentence_date(sentence: str, note_time: float) -> Optional[float]:
    """Epoch of the calendar day a sentence pins its clock times to, if any"""
    for pattern in (DATE_ISO, DATE_US):
        match = pattern.search(sentence)
        if match:
            try:
                day = pd.Timestamp(year=int(match['y']), month=int(match['mo']), day=int(match['d']), tz='UTC')
            except ValueError:
                continue
            return day.timestamp()
    if YESTERDAY.search(sentence):
        return _day_start(note_time) - DAY
    return None


@dataclass
class _Candidate:
    ts: float
    confidence: Confidence
    span: Tuple[int, int]


def _temporal_candidates(text: str, lo: int, hi: int, note_time: float, lexicon: Lexicon) -> List[_Candidate]:
    sentence = text[lo:hi]
    note_day = _day_start(note_time)
    note_clock = (note_time - note_day) / 60.0
    pinned_day = _sentence_date(sentence, note_time)
    found: List[_Candidate] = []
    taken: List[Tuple[int, int]] = []

    def absolute(minutes: int, span: Tuple[int, int]):
        if pinned_day is not None:
            ts = pinned_day + 60.0 * minutes
        else:
            ts = note_day + 60.0 * minutes
            if minutes > note_clock:
                ts -= DAY
        found.append(_Candidate(ts, Confidence.HIGH, span))

    for match in lexicon.anchor_pattern().finditer(sentence):
        anchor = lexicon.anchors[match.group(0).lower()]
        span = (lo + match.start(), lo + match.end())
        taken.append(match.span())
        if anchor.absolute:
            absolute(anchor.minutes, span)
        else:
            # a day-part names a calendar clock time, so it moves with the note date only
            ts = note_day + anchor.day_offset * DAY + 60.0 * anchor.minutes
            found.append(_Candidate(ts, Confidence.HIGH, span))

    for pattern in (CLOCK, HOUR_AMPM):
        for match in pattern.finditer(sentence):
            if any(s < match.end() and match.start() < e for s, e in taken):
                continue
            minutes = _clock_minutes(int(match['h']), int(match.groupdict().get('m') or 0), match['ampm'])
            if minutes is None:
                continue
            taken.append(match.span())
            absolute(minutes, (lo + match.start(), lo + match.end()))

    for match in RELATIVE.finditer(sentence):
        n = match['n'].lower()
        amount = NUMBER_WORDS[n] if n in NUMBER_WORDS else float(n)
        unit = match['unit'].lower()
        scale = 86400.0 if unit.startswith('d') else 3600.0 if unit.startswith('h') else 60.0
        found.append(_Candidate(note_time - amount * scale, Confidence.MEDIUM,
                                (lo + match.start(), lo + match.end())))

    return [c for c in found if c.ts <= note_time + FUTURE_TOLERANCE_S]


def parse_note(note: NoteRecord, lexicon: Optional[Lexicon] = None) -> OnsetResolution:
    """
    Resolve the onset a note documents

    Cascade: an unguarded acute trigger is required (otherwise NonEvent); the
    earliest clock or relative time in a trigger's sentence gives an Explicit
    onset (High for clock times and day-parts such as "this morning",
    Medium for offsets counted back from the note time); a trigger with no
    usable time falls back to the note time as a Low-confidence Proxy.
    """
    lexicon = lexicon or default_lexicon()
    text = note.text or ""
    meta = {'note_id': note.note_id, 'patient_id': note.patient_id}

    triggers = [m for m in lexicon.trigger_pattern().finditer(text)
                if not is_guarded(text, m.start(), m.end(), lexicon)]
    if not triggers:
        return OnsetResolution(ResolutionKind.NON_EVENT, **meta)

    candidates: List[_Candidate] = []
    for sentence in sorted({_sentence_bounds(text, m.start()) for m in triggers}):
        candidates.extend(_temporal_candidates(text, sentence[0], sentence[1], note.note_time, lexicon))
    if candidates:
        best = min(candidates, key=lambda c: (c.ts, c.span))
        return OnsetResolution(ResolutionKind.EXPLICIT, best.ts, best.confidence, best.span, **meta)
    return OnsetResolution(ResolutionKind.PROXY, note.note_time, Confidence.LOW, None, **meta)


@dataclass
class CorpusResult:
    onsets: Dict[str, OnsetResolution]
    resolutions: List[OnsetResolution]
    patients: List[str]

    def report(self) -> dict:
        counts = {kind.value: 0 for kind in ResolutionKind}
        for r in self.resolutions:
            counts[r.kind.value] += 1
        return {
            'n_notes': len(self.resolutions),
            'n_patients': len(self.patients),
            'n_onsets': len(self.onsets),
            'kinds': counts,
        }

    def onset_map(self) -> Dict[str, Optional[float]]:
        """Onset per patient; patients whose notes hold no onset map to None"""
        return {p: (self.onsets[p].ts if p in self.onsets else None) for p in self.patients}

    def to_csv(self, path: str) -> str:
        rows = []
        for patient_id in sorted(self.onsets):
            r = self.onsets[patient_id]
            span = f"{r.matched_span[0]}:{r.matched_span[1]}" if r.matched_span else ""
            rows.append({'patient_id': patient_id, 'onset_epoch_s': r.ts, 'kind': r.kind.value,
                         'confidence': r.confidence.value, 'matched_span': span})
        frame = pd.DataFrame(rows, columns=['patient_id', 'onset_epoch_s', 'kind', 'confidence', 'matched_span'])
        os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
        frame.to_csv(path, index=False, float_format='%.3f', lineterminator='\n')
        return path


def parse_corpus(notes: Iterable[NoteRecord], lexicon: Optional[Lexicon] = None) -> CorpusResult:
    """Per patient: earliest Explicit onset, else earliest Proxy, else no onset"""
    lexicon = lexicon or default_lexicon()
    resolutions = [parse_note(n, lexicon) for n in notes]
    patients = sorted({r.patient_id for r in resolutions})
    onsets: Dict[str, OnsetResolution] = {}
    for kind in (ResolutionKind.EXPLICIT, ResolutionKind.PROXY):
        for r in resolutions:
            if r.kind is not kind or (r.patient_id in onsets and onsets[r.patient_id].kind is not kind):
                continue
            if r.patient_id not in onsets or r.ts < onsets[r.patient_id].ts:
                onsets[r.patient_id] = r
    logger.info("Parsed %d notes: %d patients with an onset", len(resolutions), len(onsets))
    return CorpusResult(onsets, resolutions, patients)


def parse_time(value) -> float:
    """Epoch seconds from an epoch number or an ISO-8601 string (naive times are UTC)"""
    if isinstance(value, (int, float)):
        return float(value)
    stamp = pd.Timestamp(value)
    if stamp.tzinfo is None:
        stamp = stamp.tz_localize('UTC')
    return stamp.timestamp()


def load_notes(path: str) -> List[NoteRecord]:
    """One JSON object per line with note_id, patient_id, note_time, text"""
    notes = []
    with open(path, 'r', encoding='utf-8') as f:
        for number, line in enumerate(f, start=1):
            if not line.strip():
                continue
            record = json.loads(line)
            try:
                notes.append(NoteRecord(str(record.get('note_id', f"line{number}")), str(record['patient_id']),
                                        parse_time(record['note_time']), record['text']))
            except (KeyError, ValueError) as e:
                raise ValueError(f"{path}:{number}: invalid note record ({e})")
    return notes
