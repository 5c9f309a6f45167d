import json

import numpy as np
import pytest

from mmft.synthdata import (
    DataFormatError,
    DiagnosticTag,
    GenerationError,
    SynthSpec,
    example_to_dict,
    generate,
    ingest_tvqa,
    question_family,
    read_tags,
    string_match_predict,
    write_jsonl,
    write_tags,
)
from mmft.textpipe import render_subtitles, tokenize, visual_tokens


class TestGenerate:
    def test_seed_determinism(self):
        spec = SynthSpec(n_examples=50, seed=3)
        a, tags_a = generate(spec)
        b, tags_b = generate(SynthSpec(n_examples=50, seed=3))
        for x, y in zip(a, b):
            assert example_to_dict(x) == example_to_dict(y)
        assert tags_a == tags_b

    def test_visual_only_clean_solved_by_visual_oracle(self):
        spec = SynthSpec(n_examples=400, modality_mix=(1.0, 0.0, 0.0), clean=True, seed=5)
        examples, tags = generate(spec)
        assert all(t.required_modality == "V" and t.clean for t in tags)
        hits = sum(string_match_predict(ex, "V") == ex.label for ex in examples)
        assert hits == len(examples)

    def test_visual_oracle_at_chance_on_subtitle_corpus(self):
        spec = SynthSpec(n_examples=2000, modality_mix=(0.0, 1.0, 0.0), seed=6)
        examples, _ = generate(spec)
        acc = np.mean([string_match_predict(ex, "V") == ex.label for ex in examples])
        assert 0.17 <= acc <= 0.23

    def test_subtitle_oracle_solves_subtitle_corpus(self):
        spec = SynthSpec(n_examples=300, modality_mix=(0.0, 1.0, 0.0), seed=7)
        examples, _ = generate(spec)
        hits = sum(string_match_predict(ex, "S") == ex.label for ex in examples)
        assert hits == len(examples)

    def test_both_family_defeats_single_modality_oracles(self):
        spec = SynthSpec(n_examples=2000, modality_mix=(0.0, 0.0, 1.0), seed=8)
        examples, tags = generate(spec)
        assert all(t.required_modality == "BOTH" for t in tags)
        v_acc = np.mean([string_match_predict(ex, "V") == ex.label for ex in examples])
        s_acc = np.mean([string_match_predict(ex, "S") == ex.label for ex in examples])
        assert v_acc < 0.35
        assert s_acc < 0.35

    def test_label_blind_predictor_at_chance(self):
        spec = SynthSpec(n_examples=2000, seed=9)
        examples, _ = generate(spec)
        acc = np.mean([ex.label == 0 for ex in examples])
        assert 0.17 <= acc <= 0.23

    def test_clean_evidence_always_present(self):
        spec = SynthSpec(n_examples=300, seed=10, clean=True)
        examples, tags = generate(spec)
        for ex, tag in zip(examples, tags):
            assert tag.clean
            answer = tokenize(ex.answers[ex.label])
            if tag.required_modality in ("V", "BOTH"):
                tokens = set(visual_tokens(ex, localized=False))
                if tag.required_modality == "V" or question_family(ex.question) == "what":
                    assert set(answer) <= tokens
            if tag.required_modality == "S":
                assert set(answer) <= set(render_subtitles(ex, localized=False))

    def test_evidence_withholding(self):
        spec = SynthSpec(n_examples=600, seed=11, clean=False, evidence_rate=0.41)
        examples, tags = generate(spec)
        dirty = [t for t in tags if not t.clean]
        rate = 1 - len(dirty) / len(tags)
        assert 0.33 <= rate <= 0.49
        for ex, tag in zip(examples, tags):
            if tag.clean or tag.required_modality != "V":
                continue
            answer = set(tokenize(ex.answers[ex.label]))
            assert not answer <= set(visual_tokens(ex, localized=False))

    def test_distractor_planting(self):
        spec = SynthSpec(n_examples=300, seed=12, distractor_rate=1.0,
                         modality_mix=(1.0, 0.0, 0.0))
        examples, _ = generate(spec)
        planted = 0
        for ex in examples:
            s_tokens = set(render_subtitles(ex, localized=False))
            wrong = [a for i, a in enumerate(ex.answers) if i != ex.label]
            planted += any(set(tokenize(w)) <= s_tokens for w in wrong)
        assert planted == len(examples)

    def test_family_coverage(self):
        spec = SynthSpec(n_examples=600, seed=13)
        examples, _ = generate(spec)
        families = {question_family(ex.question) for ex in examples}
        assert families == {"what", "who", "where", "why", "how", "others"}

    def test_family_restriction(self):
        spec = SynthSpec(n_examples=100, seed=14, families=("where",),
                         modality_mix=(0.0, 1.0, 0.0))
        examples, _ = generate(spec)
        assert all(question_family(ex.question) == "where" for ex in examples)

    def test_infeasible_spec_rejected(self):
        with pytest.raises(GenerationError):
            SynthSpec(n_attributes=4)
        with pytest.raises(GenerationError):
            SynthSpec(modality_mix=(0.5, 0.2, 0.2))
        with pytest.raises(GenerationError):
            generate(SynthSpec(families=("who",), modality_mix=(1.0, 0.0, 0.0)))


class TestDatasetIO:
    def test_roundtrip_through_files(self, tmp_path):
        examples, tags = generate(SynthSpec(n_examples=40, seed=15))
        data = tmp_path / "data.jsonl"
        write_jsonl(examples, data)
        loaded, errors = ingest_tvqa(data)
        assert not errors
        assert [example_to_dict(e) for e in loaded] == [example_to_dict(e) for e in examples]

        # byte-level round trip: re-emitting what we ingested is identical
        again = tmp_path / "again.jsonl"
        write_jsonl(loaded, again)
        assert again.read_bytes() == data.read_bytes()

    def test_tags_roundtrip(self, tmp_path):
        _, tags = generate(SynthSpec(n_examples=25, seed=16))
        path = tmp_path / "tags.jsonl"
        write_tags(tags, path)
        assert read_tags(path) == tags

    def test_label_out_of_range_rejected(self, tmp_path):
        line = example_to_dict(generate(SynthSpec(n_examples=1, seed=17))[0][0])
        line["answer_idx"] = 7
        path = tmp_path / "bad.jsonl"
        path.write_text(json.dumps(line) + "\n")
        with pytest.raises(DataFormatError, match=r"line 1.*\[0, 5\)"):
            ingest_tvqa(path)

    def test_duplicate_concepts_collapse_to_first(self, tmp_path):
        line = example_to_dict(generate(SynthSpec(n_examples=1, seed=18))[0][0])
        line["vcpt"] = ["blue shirt", "red hat", "blue shirt"]
        path = tmp_path / "dup.jsonl"
        path.write_text(json.dumps(line) + "\n")
        examples, _ = ingest_tvqa(path)
        assert examples[0].vcpt == ["blue shirt", "red hat"]

    def test_fail_fast_off_collects_errors(self, tmp_path):
        good = json.dumps(example_to_dict(generate(SynthSpec(n_examples=1, seed=19))[0][0]))
        path = tmp_path / "mixed.jsonl"
        path.write_text("not json\n" + good + "\n" + '{"qid": 1}\n')
        examples, errors = ingest_tvqa(path, fail_fast=False)
        assert len(examples) == 1
        assert len(errors) == 2
        assert "line 1" in errors[0] and "line 3" in errors[1]

    def test_malformed_ts_rejected(self, tmp_path):
        line = example_to_dict(generate(SynthSpec(n_examples=1, seed=20))[0][0])
        line["ts"] = [5.0, 1.0]
        path = tmp_path / "ts.jsonl"
        path.write_text(json.dumps(line) + "\n")
        with pytest.raises(DataFormatError, match="start"):
            ingest_tvqa(path)
