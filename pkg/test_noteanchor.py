#!/usr/bin/env python3
"""
Onset Anchoring Test Script
Rule-by-rule cases for the note parser, the annotated note corpus and the
per-patient resolution order
"""

import json
import os
import sys
import tempfile

# Add src directory to path
sys.path.append(os.path.join(os.path.dirname(os.path.abspath(__file__)), 'src'))

from noteanchor import (Confidence, Lexicon, NoteRecord, ResolutionKind, default_lexicon, load_notes,
                        parse_corpus, parse_note, parse_time)

ROOT = os.path.dirname(os.path.abspath(__file__))
GOLD_NOTES = os.path.join(ROOT, 'data', 'notes_gold.jsonl')
NOTE_TIME = '2019-03-04T10:00:00Z'

E, P, N = ResolutionKind.EXPLICIT, ResolutionKind.PROXY, ResolutionKind.NON_EVENT
H, M, L = Confidence.HIGH, Confidence.MEDIUM, Confidence.LOW

# (text, note time, kind, expected onset, confidence)
CASES = [
    # clock times
    ("Acute stroke, onset at 6:30 AM.", NOTE_TIME, E, '2019-03-04T06:30:00Z', H),
    ("ACUTE STROKE ONSET AT 6:30 AM.", NOTE_TIME, E, '2019-03-04T06:30:00Z', H),
    ("Code stroke called at 14:20 for right facial droop.", '2019-03-05T15:05:00Z', E, '2019-03-05T14:20:00Z', H),
    ("Acute ischemic stroke, last known well around 23:40.", '2019-03-06T01:10:00Z', E, '2019-03-05T23:40:00Z', H),
    ("New onset weakness at 11 pm.", '2019-03-21T01:30:00Z', E, '2019-03-20T23:00:00Z', H),
    ("Acute stroke, last seen normal at 7 a.m.", '2019-03-22T09:20:00Z', E, '2019-03-22T07:00:00Z', H),
    ("Acute ischemic stroke, onset at 9:40 AM, tPA given at 10:55.", '2019-03-17T11:00:00Z', E,
     '2019-03-17T09:40:00Z', H),
    ("Prior imaging was reviewed and then new onset aphasia at 9:00.", NOTE_TIME, E, '2019-03-04T09:00:00Z', H),
    # dates pin the clock to a calendar day
    ("Code stroke for symptoms starting 2019-03-12 at 04:15 per EMS.", '2019-03-12T06:00:00Z', E,
     '2019-03-12T04:15:00Z', H),
    ("Acute ischemic stroke with onset 3/13/2019 at 9:10 PM.", '2019-03-14T02:00:00Z', E, '2019-03-13T21:10:00Z', H),
    ("New onset right hemiparesis yesterday at 5:45 PM.", '2019-03-15T09:00:00Z', E, '2019-03-14T17:45:00Z', H),
    # vague clock phrases
    ("Acute stroke at noon.", '2019-03-04T13:30:00Z', E, '2019-03-04T12:00:00Z', H),
    ("Acute stroke at noon.", '2019-03-04T11:00:00Z', E, '2019-03-03T12:00:00Z', H),
    ("CVA, onset at midnight per family.", '2019-04-06T02:30:00Z', E, '2019-04-06T00:00:00Z', H),
    ("Acute stroke this morning.", NOTE_TIME, E, '2019-03-04T08:00:00Z', H),
    ("Acute stroke that began early this morning.", NOTE_TIME, E, '2019-03-04T05:00:00Z', H),
    ("Stroke alert: new-onset left arm weakness this morning.", '2019-03-04T11:00:00Z', E, '2019-03-04T08:00:00Z', H),
    ("Stroke code activated this afternoon.", '2019-03-04T16:20:00Z', E, '2019-03-04T14:00:00Z', H),
    ("Acute stroke this evening.", '2019-03-04T21:00:00Z', E, '2019-03-04T19:00:00Z', H),
    ("Acute stroke with onset last evening.", NOTE_TIME, E, '2019-03-03T19:00:00Z', H),
    ("CVA suspected, symptoms noticed last night.", NOTE_TIME, E, '2019-03-03T22:00:00Z', H),
    ("Overnight nursing noted new onset left neglect.", '2019-03-04T07:00:00Z', E, '2019-03-04T02:00:00Z', H),
    # relative expressions
    ("New onset left hemiparesis, symptoms began 2 hours ago.", NOTE_TIME, E, '2019-03-04T08:00:00Z', M),
    ("CVA with symptoms starting 45 minutes ago.", NOTE_TIME, E, '2019-03-04T09:15:00Z', M),
    ("New onset vertigo, onset an hour ago.", NOTE_TIME, E, '2019-03-04T09:00:00Z', M),
    ("Acute stroke, onset 1.5 hours ago.", NOTE_TIME, E, '2019-03-04T08:30:00Z', M),
    ("Acute stroke two days ago.", NOTE_TIME, E, '2019-03-02T10:00:00Z', M),
    ("New onset aphasia 3 hours earlier per EMS.", NOTE_TIME, E, '2019-03-04T07:00:00Z', M),
    ("Stroke alert, last known well 2 hrs prior.", NOTE_TIME, E, '2019-03-04T08:00:00Z', M),
    ("New onset aphasia started 30 min ago.", NOTE_TIME, E, '2019-03-04T09:30:00Z', M),
    # guards that do not fire
    ("72 year old woman with new onset dysarthria, onset 3 hours ago.", '2019-03-10T09:45:00Z', E,
     '2019-03-10T06:45:00Z', M),
    ("History of hypertension. Acute ischemic stroke with onset at 13:05.", '2019-04-04T14:00:00Z', E,
     '2019-04-04T13:05:00Z', H),
    ("Prior to arrival, new onset slurred speech at 5:20 AM.", '2019-04-05T06:00:00Z', E,
     '2019-04-05T05:20:00Z', H),
    # trigger without a usable time
    ("Code stroke: patient found down, unknown onset.", NOTE_TIME, P, NOTE_TIME, L),
    ("Code stroke. Patient not at baseline.", NOTE_TIME, P, NOTE_TIME, L),
    ("Acute stroke suspected. Vitals at 9:00 were stable.", NOTE_TIME, P, NOTE_TIME, L),
    ("Acute stroke at 25:00.", NOTE_TIME, P, NOTE_TIME, L),
    ("Acute stroke, follow-up scheduled 2019-03-10 at 09:00.", NOTE_TIME, P, NOTE_TIME, L),
    # non-events
    ("History of CVA in 2010, no acute events today.", NOTE_TIME, N, None, None),
    ("Prior stroke in 2015. No evidence of acute stroke on exam.", NOTE_TIME, N, None, None),
    ("Denies acute stroke symptoms, no focal deficits.", NOTE_TIME, N, None, None),
    ("Old CVA on CT, no acute findings.", NOTE_TIME, N, None, None),
    ("Acute stroke ruled out by MRI.", NOTE_TIME, N, None, None),
    ("Acute stroke was excluded after imaging.", NOTE_TIME, N, None, None),
    ("Acute stroke unlikely given exam.", NOTE_TIME, N, None, None),
    ("R/O CVA; MRI pending.", NOTE_TIME, N, None, None),
    ("Patient with h/o CVA, no new complaints.", NOTE_TIME, N, None, None),
    ("Negative for acute stroke on CT perfusion.", NOTE_TIME, N, None, None),
    ("Without any acute stroke signs on exam.", NOTE_TIME, N, None, None),
    ("No signs of new onset deficits.", NOTE_TIME, N, None, None),
    ("Remote history of CVA, presents with chest pain.", NOTE_TIME, N, None, None),
    ("Routine post-op check, ambulating well.", NOTE_TIME, N, None, None),
    ("", NOTE_TIME, N, None, None),
]


def resolve(text, note_time, lexicon=None):
    return parse_note(NoteRecord('T-N1', 'T', parse_time(note_time), text), lexicon)


def check_case(text, note_time, kind, onset, confidence):
    result = resolve(text, note_time)
    assert result.kind is kind, f"{text!r}: {result.kind} != {kind}"
    if onset is None:
        assert result.ts is None and result.confidence is None, f"{text!r}: non-event carries a time"
    else:
        assert result.ts == parse_time(onset), f"{text!r}: {result.ts} != {parse_time(onset)}"
        assert result.confidence is confidence, f"{text!r}: {result.confidence} != {confidence}"
    return result


def test_rule_cases():
    """Every rule of the cascade on hand-written notes"""
    print("📝 Testing Rule Cases")
    print("=" * 40)

    for case in CASES:
        result = check_case(*case)
        if result.kind is E:
            start, end = result.matched_span
            assert 0 <= start < end <= len(case[0])
    kinds = [case[2] for case in CASES]
    print(f"✅ {len(CASES)} cases: {kinds.count(E)} explicit, {kinds.count(P)} proxy, {kinds.count(N)} non-event")
    return True


def test_properties():
    """Guards dominate, unrelated sentences change nothing, onsets never lie ahead"""
    print("\n🧭 Testing Resolution Properties")
    print("=" * 40)

    for text, note_time, kind, onset, confidence in CASES:
        check_case(text + " Vitals stable.", note_time, kind, onset, confidence)
        result = resolve(text, note_time)
        if result.is_onset:
            assert result.ts <= parse_time(note_time) + 86400.0
    print("✅ Appending a sentence without triggers keeps every resolution")

    lexicon = default_lexicon()
    for trigger in lexicon.triggers:
        plain = resolve(f"{trigger} at 6:30 AM.", NOTE_TIME)
        assert plain.kind is E and plain.ts == parse_time('2019-03-04T06:30:00Z'), trigger
        for guard in ('History of', 'No evidence of', 'Denies'):
            guarded = resolve(f"{guard} {trigger} at 6:30 AM.", NOTE_TIME)
            assert guarded.kind is N, f"{guard} {trigger}"
    print(f"✅ Guards cancel all {len(lexicon.triggers)} triggers")
    return True


def test_gold_corpus():
    """Annotated notes: onset within 15 minutes or a matching non-event"""
    print("\n🏅 Testing Annotated Corpus")
    print("=" * 40)

    notes = load_notes(GOLD_NOTES)
    gold = {}
    with open(GOLD_NOTES, 'r', encoding='utf-8') as f:
        for line in f:
            record = json.loads(line)
            gold[record['note_id']] = record['gold_onset']

    agreed = 0
    for note in notes:
        result = parse_note(note)
        expected = gold[note.note_id]
        if expected is None:
            ok = result.kind is N
        else:
            ok = result.is_onset and abs(result.ts - parse_time(expected)) <= 15 * 60
        agreed += ok
        if not ok:
            print(f"  ⚠️  {note.note_id}: {result.kind.value} {result.ts} vs {expected}")
    rate = agreed / len(notes)
    print(f"📊 Agreement: {agreed}/{len(notes)} ({rate:.1%})")
    assert len(notes) >= 60 and rate >= 0.95
    return True


def test_note_time_shift():
    """Moving a note in time moves Medium/Low onsets with it; High onsets move only by whole days"""
    print("\n⏩ Testing Note-Time Shifts")
    print("=" * 40)

    notes = load_notes(GOLD_NOTES)
    shifts = (-(11 * 3600 + 17 * 60), -5400, 1, 2437, 7 * 3600, 3 * 86400 + 1234)
    checked = {H: 0, M: 0, L: 0}
    for note in notes:
        base = parse_note(note)
        for delta in shifts:
            moved = parse_note(NoteRecord(note.note_id, note.patient_id, note.note_time + delta, note.text))
            assert moved.kind is base.kind and moved.confidence is base.confidence, f"{note.note_id} shifted {delta}"
            if not base.is_onset:
                continue
            if base.confidence is H:
                assert (moved.ts - base.ts) % 86400.0 == 0.0, f"{note.note_id}: {moved.ts - base.ts} s at {delta}"
            else:
                assert moved.ts - base.ts == delta, f"{note.note_id}: {moved.ts - base.ts} s at {delta}"
            checked[base.confidence] += 1
    assert checked[M] > 0 and checked[L] > 0 and checked[H] > 0
    print(f"✅ {len(notes)} notes x {len(shifts)} shifts: "
          f"{checked[H]} High, {checked[M]} Medium, {checked[L]} Low resolutions")
    return True


def test_corpus_resolution():
    """Explicit beats Proxy per patient, earliest wins within a kind"""
    print("\n🗂️  Testing Per-Patient Resolution")
    print("=" * 40)

    notes = [
        NoteRecord('A-N1', 'A', parse_time('2019-03-04T08:00:00Z'), "Code stroke called."),
        NoteRecord('A-N2', 'A', parse_time('2019-03-04T12:00:00Z'), "Acute stroke, onset at 9:00 AM."),
        NoteRecord('A-N3', 'A', parse_time('2019-03-04T13:00:00Z'), "Acute stroke, onset at 10:30 AM."),
        NoteRecord('B-N1', 'B', parse_time('2019-03-04T10:00:00Z'), "Code stroke activated."),
        NoteRecord('B-N2', 'B', parse_time('2019-03-04T09:00:00Z'), "Code stroke repeat."),
        NoteRecord('C-N1', 'C', parse_time('2019-03-04T09:00:00Z'), "History of CVA."),
    ]
    corpus = parse_corpus(notes)
    assert corpus.onset_map() == {'A': parse_time('2019-03-04T09:00:00Z'),
                                  'B': parse_time('2019-03-04T09:00:00Z'), 'C': None}
    assert corpus.onsets['A'].note_id == 'A-N2' and corpus.onsets['B'].kind is P
    assert corpus.report() == {'n_notes': 6, 'n_patients': 3, 'n_onsets': 2,
                               'kinds': {'Explicit': 2, 'Proxy': 3, 'NonEvent': 1}}

    with tempfile.TemporaryDirectory() as tmp:
        path = corpus.to_csv(os.path.join(tmp, 'onsets.csv'))
        with open(path, 'r', encoding='utf-8') as f:
            lines = f.read().splitlines()
    assert lines[0] == 'patient_id,onset_epoch_s,kind,confidence,matched_span'
    assert lines[1].startswith('A,') and ',Explicit,High,' in lines[1]
    assert lines[2].endswith(',Proxy,Low,')
    print("✅ A: Explicit 09:00, B: earliest Proxy, C: no onset")
    return True


def test_note_loading_and_lexicon():
    """JSONL loading errors and an edited lexicon file"""
    print("\n📚 Testing Loading And Lexicon")
    print("=" * 40)

    with tempfile.TemporaryDirectory() as tmp:
        path = os.path.join(tmp, 'notes.jsonl')
        with open(path, 'w', encoding='utf-8') as f:
            f.write(json.dumps({'patient_id': 'X', 'note_time': 1551693600, 'text': 'Code stroke.'}) + '\n\n')
            f.write(json.dumps({'patient_id': 'Y', 'note_time': '2019-03-04T10:00:00'}) + '\n')
        try:
            load_notes(path)
        except ValueError as e:
            assert ':3:' in str(e), str(e)
        else:
            raise AssertionError("a note without text should fail")

        with open(path, 'w', encoding='utf-8') as f:
            f.write(json.dumps({'patient_id': 'Y', 'note_time': '2019-03-04T10:00:00', 'text': 'x'}) + '\n')
        (note,) = load_notes(path)
        assert note.note_time == parse_time(NOTE_TIME) and note.note_id == 'line1'

        lexicon_path = os.path.join(tmp, 'lexicon.txt')
        with open(lexicon_path, 'w', encoding='utf-8') as f:
            f.write("# custom\n[meta]\nversion = 7\n[triggers]\nBrain attack\n[guards]\nno\n"
                    "[anchors]\nat dawn = 06:00 0 absolute\n")
        lexicon = Lexicon.load(lexicon_path)
        assert lexicon.version == '7' and lexicon.triggers == ('brain attack',)
        dawn = resolve("Brain attack at dawn.", NOTE_TIME, lexicon)
        assert dawn.kind is E and dawn.ts == parse_time('2019-03-04T06:00:00Z') and dawn.confidence is H
        assert resolve("No brain attack.", NOTE_TIME, lexicon).kind is N
        assert resolve("Acute stroke at 6:30 AM.", NOTE_TIME, lexicon).kind is N

        with open(lexicon_path, 'w', encoding='utf-8') as f:
            f.write("stray entry\n[triggers]\nstroke\n")
        try:
            Lexicon.load(lexicon_path)
        except ValueError as e:
            assert 'outside a section' in str(e)
        else:
            raise AssertionError("entries before a section header should fail")

    try:
        NoteRecord('Z', 'Z', float('nan'), 'text')
    except ValueError:
        pass
    else:
        raise AssertionError("a NaN note time should fail")
    print("✅ Loader errors carry line numbers; custom lexicon drives the parser")
    return True


TESTS = [
    ("Rule Cases", test_rule_cases),
    ("Resolution Properties", test_properties),
    ("Annotated Corpus", test_gold_corpus),
    ("Note-Time Shifts", test_note_time_shift),
    ("Per-Patient Resolution", test_corpus_resolution),
    ("Loading And Lexicon", test_note_loading_and_lexicon),
]


def main():
    """Run all onset anchoring tests"""
    print("🚀 PPG Stroke Early-Warning - Onset Anchoring Tests")
    print("=" * 50)

    results = []
    for name, test in TESTS:
        try:
            results.append((name, bool(test())))
        except Exception as e:
            print(f"❌ {name} failed: {type(e).__name__}: {e}")
            results.append((name, False))

    print("\n📋 Test Summary")
    print("=" * 40)
    all_passed = True
    for test_name, passed in results:
        status = "✅ PASSED" if passed else "❌ FAILED"
        print(f"  {test_name:25} {status}")
        all_passed = all_passed and passed

    print(f"\n🎯 Overall Result: {'✅ ALL TESTS PASSED' if all_passed else '❌ SOME TESTS FAILED'}")
    return all_passed


if __name__ == "__main__":
    success = main()
    sys.exit(0 if success else 1)
