import json

import numpy as np
import pytest

from spritediff.configs import (
    ConfigError,
    DiffusionTrainConfig,
    PreferenceTrainConfig,
    RewardFinetuneConfig,
    config_from_dict,
    load_config,
)
from spritediff.data import (
    read_dialogues,
    read_preference_pairs,
    synth_dialogues,
    synth_preference_pairs,
    write_dialogues,
    write_preference_pairs,
)
from spritediff.world import render


def test_synth_pairs_positive_matches_prompt():
    rng = np.random.default_rng(0)
    pairs = synth_preference_pairs(50, rng)
    for p in pairs:
        assert np.array_equal(p.image_pos, render(p.prompt))
        assert not np.array_equal(p.image_neg, p.image_pos)


def test_pairs_file_round_trip(tmp_path):
    rng = np.random.default_rng(1)
    pairs = synth_preference_pairs(12, rng)
    path = write_preference_pairs(pairs, tmp_path)
    assert path.name == "preference_pairs.jsonl"
    lines = path.read_text().strip().splitlines()
    assert len(lines) == 12
    back = read_preference_pairs(path)
    for a, b in zip(pairs, back):
        assert a.prompt == b.prompt
        assert np.array_equal(a.image_pos, b.image_pos)
        assert np.array_equal(a.image_neg, b.image_neg)


def test_synth_dialogues_structure():
    rng = np.random.default_rng(2)
    records = synth_dialogues(10, rng, max_rounds=8)
    by_session = {}
    for r in records:
        by_session.setdefault(r.session, []).append(r)
    for sess, rounds in by_session.items():
        assert [r.round_index for r in rounds] == list(range(1, len(rounds) + 1))
        # scripted walks end with acceptance within the mismatch budget
        assert rounds[-1].feedback.kind in ("accept", "attribute-correction")
        for prev, nxt in zip(rounds, rounds[1:]):
            fixed = prev.prompt.replace(prev.feedback.field, prev.feedback.value)
            assert nxt.prompt == fixed


def test_dialogues_file_round_trip(tmp_path):
    rng = np.random.default_rng(3)
    records = synth_dialogues(5, rng)
    path = write_dialogues(records, tmp_path)
    back = read_dialogues(path)
    assert len(back) == len(records)
    for a, b in zip(records, back):
        assert (a.session, a.round_index, a.prompt) == (b.session, b.round_index, b.prompt)
        assert np.array_equal(a.image, b.image)
        if a.prev_image is None:
            assert b.prev_image is None
        else:
            assert np.array_equal(a.prev_image, b.prev_image)


def test_config_unknown_key_rejected():
    with pytest.raises(ConfigError) as err:
        config_from_dict({"out_dir": "x", "learning_rt": 1e-3}, DiffusionTrainConfig)
    assert "learning_rt" in str(err.value)


def test_config_validation_errors():
    with pytest.raises(ConfigError):
        config_from_dict({"out_dir": "x", "finetune_t1": 50, "finetune_t2": 10},
                         DiffusionTrainConfig)
    with pytest.raises(ConfigError):
        config_from_dict({"out_dir": "x", "epochs": 0}, PreferenceTrainConfig)
    with pytest.raises(ConfigError):
        config_from_dict({"out_dir": "x", "base_checkpoint": "a",
                          "preference_checkpoint": "b", "ablation": "everything"},
                         RewardFinetuneConfig)


def test_load_config_file(tmp_path):
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps({"out_dir": str(tmp_path), "seed": 3}))
    cfg = load_config(path, DiffusionTrainConfig)
    assert cfg.seed == 3
    path.write_text("{broken")
    with pytest.raises(ConfigError):
        load_config(path, DiffusionTrainConfig)
