import numpy as np
import pytest

from cot_repe.dump import (
    ActivationDump,
    DumpRecord,
    DumpSource,
    dump_prefixes,
    dump_prompts,
    load_dump,
    prefix_texts,
    save_dump,
)
from cot_repe.enum import Polarity
from cot_repe.exceptions import CorruptFile, DumpMissingLayer, DumpMissingPrompt, IoFailure

PROMPTS = [
    ("USER: Is the coin still heads up?\nASSISTANT: Let's think step by step.", Polarity.POSITIVE),
    ("USER: Is the coin still heads up?\nASSISTANT:", Polarity.NEGATIVE),
]


@pytest.fixture
def dump(runner):
    return dump_prompts(runner, PROMPTS, [1, 2, 3])


def test_dump_holds_two_prompts_by_three_layers(dump, runner):
    assert dump.layers == [1, 2, 3]
    assert [record.polarity for record in dump.records] == [Polarity.POSITIVE, Polarity.NEGATIVE]
    assert dump.records[0].vectors.shape == (3, runner.hidden_dim)
    assert dump.model_id == runner.model_id


def test_file_round_trip(tmp_path, dump):
    path = tmp_path / "activations.rotd"
    save_dump(dump, path)
    loaded = load_dump(path)

    assert loaded.model_id == dump.model_id
    assert loaded.layers == dump.layers
    assert [record.prompt for record in loaded.records] == [prompt for prompt, _ in PROMPTS]
    for original, restored in zip(dump.records, loaded.records, strict=True):
        np.testing.assert_array_equal(original.vectors, restored.vectors)

    save_dump(loaded, tmp_path / "again.rotd")
    assert (tmp_path / "again.rotd").read_bytes() == path.read_bytes()


def test_dump_source_matches_live_activations(tmp_path, dump, runner):
    save_dump(dump, tmp_path / "activations.rotd")
    source = DumpSource.from_file(tmp_path / "activations.rotd")

    prompt = PROMPTS[0][0]
    from_dump = source.last_token_activations(prompt, [3, 1])
    live = runner.last_token_activations(prompt, [3, 1])
    for k in (1, 3):
        np.testing.assert_allclose(from_dump[k], live[k], atol=1e-9)


def test_single_precision_dump(tmp_path, runner):
    dump = dump_prompts(runner, PROMPTS[:1], [3], dtype="f4")
    save_dump(dump, tmp_path / "f4.rotd")
    loaded = load_dump(tmp_path / "f4.rotd")
    assert loaded.dtype == "f4"
    np.testing.assert_allclose(loaded.records[0].vectors, dump.records[0].vectors, rtol=1e-6, atol=1e-6)


def test_missing_prompt_and_layer(dump):
    source = DumpSource(dump)
    with pytest.raises(DumpMissingPrompt):
        source.last_token_activations("USER: never dumped\nASSISTANT:", [1])
    with pytest.raises(DumpMissingLayer):
        source.last_token_activations(PROMPTS[0][0], [4])


def test_prefix_dump_matches_live_prefixes(runner):
    prompt = "USER: Is the coin still heads up?\nASSISTANT:"
    response = ["The", "coin", "is", "heads", "up", "."]
    source = DumpSource(dump_prefixes(runner, prompt, response, [2, 3]))

    assert [record.prompt for record in source.dump.records] == prefix_texts(prompt, response)
    np.testing.assert_allclose(
        source.prefix_activations(prompt, response, [2, 3]),
        runner.prefix_activations(prompt, response, [2, 3]),
        atol=1e-9,
    )


def test_prefix_texts():
    assert prefix_texts("P", ["a", "b"]) == ["P", "P a", "P a b"]


def test_record_shape_is_validated():
    with pytest.raises(ValueError):
        ActivationDump(
            model_id="m",
            hidden_dim=4,
            layers=[1, 2],
            records=[DumpRecord(prompt="p", vectors=np.zeros((1, 4)))],
        )


def test_corrupt_header(tmp_path, dump):
    path = tmp_path / "activations.rotd"
    save_dump(dump, path)
    data = bytearray(path.read_bytes())
    data[:4] = b"ROTX"
    path.write_bytes(bytes(data))
    with pytest.raises(CorruptFile):
        load_dump(path)


def test_trailing_bytes(tmp_path, dump):
    path = tmp_path / "activations.rotd"
    save_dump(dump, path)
    path.write_bytes(path.read_bytes() + b"\x00")
    with pytest.raises(CorruptFile):
        load_dump(path)


def test_missing_dump_file(tmp_path):
    with pytest.raises(IoFailure):
        load_dump(tmp_path / "absent.rotd")
