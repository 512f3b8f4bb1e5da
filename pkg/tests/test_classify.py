from __future__ import annotations

from collections import Counter

import pytest
from hypothesis import given, strategies as st

from carrierforge.classify import CarrierClass, Step, classify, plan_for
from carrierforge.forge import ForgeSpec, TrackSpec, build_iso, corpus_specs, forge
from carrierforge.sectors import SectorMode, wrap_wav

K, S, W, C, X, M = (Step.KEEP_IMAGE_AS_MASTER, Step.SPLIT_TRACKS, Step.WRAP_AUDIO_WAV, Step.COPY_WAV_VERBATIM,
                    Step.EXTRACT_ISO_FILES, Step.FLAG_FOR_MANUAL)


def _classify(art):
    return classify(art.image, art.cue, sources=art.files if art.cue else None)


def test_plain_iso():
    assert classify(build_iso({"A.TIF": b"x"})) is CarrierClass.ISO_DATA_DISK


def test_wav_tracks_are_malformed_audio():
    art = forge(ForgeSpec(CarrierClass.MALFORMED_AUDIO_WAV, "W",
                          tracks=tuple(TrackSpec(SectorMode.AUDIO_2352, 3, "wav") for _ in range(3))))
    assert art.image[:4] == b"RIFF" and art.image[8:12] == b"WAVE"
    assert _classify(art) is CarrierClass.MALFORMED_AUDIO_WAV


def test_leading_data_track_is_mixed_mode():
    art = forge(ForgeSpec(CarrierClass.MIXED_MODE, "M", {"A.TIF": 50}, tracks=(
        TrackSpec(SectorMode.MODE1_2352, content="iso"), TrackSpec(SectorMode.AUDIO_2352, 3),
        TrackSpec(SectorMode.AUDIO_2352, 4)), multi_file=True))
    assert _classify(art) is CarrierClass.MIXED_MODE


def test_partly_wav_cue_is_malformed():
    art = forge(ForgeSpec(CarrierClass.MALFORMED_AUDIO_WAV, "P", tracks=(
        TrackSpec(SectorMode.AUDIO_2352, 3), TrackSpec(SectorMode.AUDIO_2352, 3, "wav"))))
    assert _classify(art) is CarrierClass.MALFORMED_AUDIO_WAV


@pytest.mark.parametrize("kind, steps", [
    (CarrierClass.RED_BOOK_AUDIO, [K, S, W]),
    (CarrierClass.HFS_PLUS, [K, M]),
    (CarrierClass.UNKNOWN, [K, M]),
    (CarrierClass.MDS_OPAQUE, [K, M]),
    (CarrierClass.MIXED_MODE, [K, S, X, W]),
    (CarrierClass.MALFORMED_AUDIO_WAV, [K, S, C]),
    (CarrierClass.ISO_DATA_DISK, [K, X]),
    (CarrierClass.UDF_DATA_DISK, [K, X]),
    (CarrierClass.DVD_VIDEO, [K, X]),
])
def test_plans(kind, steps):
    plan = plan_for(kind)
    assert list(plan.steps) == steps
    assert plan.steps[0] is K
    assert plan.needs_manual == (M in steps)
    assert plan.rationale


def test_every_plan_keeps_the_master():
    assert all(plan_for(k).steps[0] is K for k in CarrierClass)


def test_empty_and_noise_are_unknown():
    assert classify(b"") is CarrierClass.UNKNOWN
    assert classify(bytes(70000)) is CarrierClass.UNKNOWN


def test_mds_wins_over_everything():
    image = bytearray(build_iso({"A.TIF": b"x"}))
    image[:16] = b"MEDIA DESCRIPTOR"
    assert classify(bytes(image)) is CarrierClass.MDS_OPAQUE


def test_corpus_confusion_matrix_is_identity():
    confusion = Counter()
    for spec in corpus_specs(count=90):
        confusion[(spec.kind, _classify(forge(spec)))] += 1
    assert all(truth is got for truth, got in confusion)
    assert {t for t, _ in confusion} == set(CarrierClass)


def test_riff_flip_reclassifies_to_red_book():
    art = forge(ForgeSpec(CarrierClass.MALFORMED_AUDIO_WAV, "F",
                          tracks=(TrackSpec(SectorMode.AUDIO_2352, 2, "wav"),)))
    files = dict(art.files)
    data = bytearray(files[art.image_name])
    data[0] ^= 0x01
    files[art.image_name] = bytes(data)
    assert classify(files[art.image_name], art.cue, sources=files) is CarrierClass.RED_BOOK_AUDIO


@given(st.binary(max_size=50000))
def test_total_on_noise(data):
    assert isinstance(classify(data), CarrierClass)


@given(st.binary(min_size=44, max_size=2352 * 2))
def test_total_with_cue(data):
    art = forge(ForgeSpec(CarrierClass.RED_BOOK_AUDIO, "N", tracks=(TrackSpec(SectorMode.AUDIO_2352, 2),)))
    result = classify(data, art.cue, sources={art.image_name: data})
    assert isinstance(result, CarrierClass)
    if len(data) % 2352 == 0 and not data.startswith(wrap_wav(b"")[:4]):
        assert result is CarrierClass.RED_BOOK_AUDIO
