import json

import numpy as np
import pytest

from ctrengine.errors import ParseError, StreamOrderError, ValidationError
from ctrengine.features import (Column, Example, FeatureSpec, SynthConfig, check_order, collate,
                                generate_synthetic, iter_synthetic, parse_examples, read_truth,
                                synthetic_dataset, write_examples, write_truth)
from ctrengine.numerics import sigmoid

from conftest import make_example


def binomial_3sigma(p, n):
    return 3.0 * np.sqrt(p * (1 - p) / n)


class TestExample:
    def test_rejects_bad_label(self):
        with pytest.raises(ValidationError):
            make_example(0, label=2)

    def test_rejects_nonpositive_weight(self):
        with pytest.raises(ValidationError):
            make_example(0, weight=0.0)

    def test_rejects_teacher_pred_outside_open_interval(self):
        with pytest.raises(ValidationError):
            make_example(0, teacher_pred=1.0)

    def test_rejects_negative_teacher_loss(self):
        with pytest.raises(ValidationError):
            make_example(0, teacher_loss=-0.1)


class TestParse:
    def test_empty_file(self, tmp_path):
        p = tmp_path / "e.jsonl"
        p.write_text("")
        assert list(parse_examples(p)) == []

    def test_round_trip(self, tmp_path):
        ex = make_example(3, label=1, position=2, q=((1, 2), (4,)), ui=1, weight=2.5,
                          teacher_pred=0.3, teacher_loss=0.1)
        p = tmp_path / "e.jsonl"
        write_examples(p, [ex])
        assert list(parse_examples(p)) == [ex]

    def test_missing_label_names_field(self, tmp_path):
        rec = make_example(0).to_json()
        del rec["label"]
        p = tmp_path / "e.jsonl"
        p.write_text(json.dumps(rec) + "\n")
        with pytest.raises(ParseError, match="label") as err:
            list(parse_examples(p))
        assert err.value.line == 1

    def test_malformed_line_number(self, tmp_path):
        p = tmp_path / "e.jsonl"
        p.write_text(json.dumps(make_example(0).to_json()) + "\n{not json\n")
        with pytest.raises(ParseError) as err:
            list(parse_examples(p))
        assert err.value.line == 2

    def test_unknown_field(self, tmp_path):
        rec = make_example(0).to_json()
        rec["colour"] = 1
        p = tmp_path / "e.jsonl"
        p.write_text(json.dumps(rec) + "\n")
        with pytest.raises(ParseError, match="colour"):
            list(parse_examples(p))

    def test_timestamp_regression(self, tmp_path):
        p = tmp_path / "e.jsonl"
        write_examples(p, [make_example(5), make_example(4)])
        with pytest.raises(StreamOrderError):
            list(parse_examples(p))

    def test_equal_timestamps_allowed(self):
        a = make_example(1)
        b = Example(2, 0, 1, 0, 1, (("q0", (0,)), ("q1", (0,))))
        assert len(list(check_order([a, b]))) == 2


class TestFeatureSpec:
    def test_round_trip(self, tiny_spec):
        assert FeatureSpec.from_dict(tiny_spec.to_dict()) == tiny_spec

    def test_rejects_zero_vocab(self):
        with pytest.raises(ValidationError):
            Column("q0", 0, 2)

    def test_unknown_column(self, tiny_spec):
        with pytest.raises(ValidationError):
            tiny_spec.column("nope")


class TestCollate:
    def test_multivalent_layout(self, tiny_spec):
        batch = collate([make_example(0, q=((1, 2, 2), (0,))), make_example(1, q=((5,), (3,)))], tiny_spec)
        ids, row_of, counts = batch.quality["q0"]
        np.testing.assert_array_equal(ids, [1, 2, 2, 5])
        np.testing.assert_array_equal(row_of, [0, 0, 0, 1])
        np.testing.assert_array_equal(counts, [3, 1])

    def test_out_of_vocab(self, tiny_spec):
        with pytest.raises(ValidationError, match="outside vocab"):
            collate([make_example(0, q=((6,), (0,)))], tiny_spec)

    def test_position_beyond_max(self, tiny_spec):
        with pytest.raises(ValidationError):
            collate([make_example(0, position=5)], tiny_spec)

    def test_missing_teacher_is_nan(self, tiny_spec):
        batch = collate([make_example(0)], tiny_spec)
        assert np.isnan(batch.teacher_pred[0])


class TestSynthetic:
    def test_deterministic(self):
        cfg = SynthConfig(n_examples=500, seed=9, drift_rate=0.01, confounding=0.5)
        a = list(generate_synthetic(cfg))
        b = list(generate_synthetic(cfg))
        assert a == b

    def test_exact_length_and_order(self):
        cfg = SynthConfig(n_examples=1001, group_size=8)
        ex = list(generate_synthetic(cfg))
        assert len(ex) == 1001
        assert [e.example_id for e in ex] == list(range(1001))
        assert all(e.query_id == e.example_id // 8 for e in ex)

    def test_groups_fill_every_slot(self):
        ex = list(generate_synthetic(SynthConfig(n_examples=800, group_size=8, confounding=0.7)))
        for g in range(100):
            assert sorted(e.position for e in ex[8 * g: 8 * g + 8]) == list(range(1, 9))

    def test_null_model_ctr(self):
        b = -1.2
        cfg = SynthConfig(n_examples=100_000, weight_scale=0.0, ui_scale=0.0,
                          position_effect=(0.0,) * 8, bias=b, seed=4)
        y = np.array([e.label for e in generate_synthetic(cfg)])
        p = sigmoid(b)
        assert abs(y.mean() - p) < binomial_3sigma(p, len(y))

    def test_confounding_favours_top_slot(self):
        cfg = SynthConfig(n_examples=80_000, confounding=1.0, position_effect=(0.0,) * 8, seed=5)
        ex = list(generate_synthetic(cfg))
        pos = np.array([e.position for e in ex])
        y = np.array([e.label for e in ex])
        assert y[pos == 1].mean() > y[pos == 8].mean()

    def test_slice_ctr_matches_truth(self):
        cfg = SynthConfig(n_examples=60_000, seed=6, drift_rate=1e-4)
        ex, z = synthetic_dataset(cfg)
        y = np.array([e.label for e in ex])
        q2 = np.array([e.quality_features[2][1][0] for e in ex])
        for v in range(3):
            m = q2 == v
            p = sigmoid(z[m])
            # labels are independent Bernoulli(p_i); 3 sigma of their sum
            assert abs(y[m].sum() - p.sum()) < 3 * np.sqrt((p * (1 - p)).sum())

    def test_truth_round_trip(self, tmp_path):
        cfg = SynthConfig(n_examples=50)
        ex, z = synthetic_dataset(cfg)
        write_truth(tmp_path / "t.jsonl", ex, z)
        back = read_truth(tmp_path / "t.jsonl")
        np.testing.assert_array_equal([back[e.example_id] for e in ex], z)

    def test_multivalent_columns(self):
        cfg = SynthConfig(n_examples=200, multivalent_columns=(0,), max_ids=3)
        counts = {len(e.quality_features[0][1]) for e in generate_synthetic(cfg)}
        assert counts <= {1, 2, 3} and len(counts) > 1

    def test_hidden_quality_is_unobserved(self):
        base = SynthConfig(n_examples=400, seed=2)
        hidden = SynthConfig(n_examples=400, seed=2, hidden_quality=1.0)
        a = [(e.quality_features, e.ui_features) for e in generate_synthetic(base)]
        b = [(e.quality_features, e.ui_features) for e in generate_synthetic(hidden)]
        assert a == b

    def test_invalid_config(self):
        with pytest.raises(ValidationError):
            SynthConfig(confounding=1.5)
        with pytest.raises(ValidationError):
            SynthConfig(n_examples=0)

    def test_iter_yields_truth(self):
        (ex, z), = list(iter_synthetic(SynthConfig(n_examples=1)))
        assert isinstance(z, float) and ex.example_id == 0
