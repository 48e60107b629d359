"""Regenerate the bundled fixture files under src/pedalign/data/."""

from pathlib import Path

from pedalign.artifacts import write_json, write_jsonl
from pedalign.fixture import FIXTURE_FILES, generate_fixture
from pedalign.prefgen import noisy_stream
from pedalign.schema import conversation_to_dict

DATA = Path(__file__).resolve().parents[1] / "src" / "pedalign" / "data"

CONFIG = {
    "corpus": FIXTURE_FILES["corpus"],
    "solutions": FIXTURE_FILES["solutions"],
    "noise": 0.3,
    "split": {"seed": 0, "sizes": [16, 14, 10]},
    "sft": {"learning_rate": 0.05, "epochs": 20},
    "lhp": {"learning_rate": 0.01, "epochs": 10, "algo": "dpo", "beta": 0.1},
    "pair_source": "both",
    "n_buckets": 1024,
    "betas": [0.1, 0.3, 0.6, 0.9],
    "algos": ["dpo", "ipo", "kto"],
}


def main():
    convs, bank = generate_fixture()
    write_jsonl(DATA / FIXTURE_FILES["corpus"], (conversation_to_dict(c) for c in convs))
    write_jsonl(DATA / FIXTURE_FILES["sft_stream"], (conversation_to_dict(c) for c in noisy_stream(convs, 0.3, seed=11)))
    write_json(DATA / FIXTURE_FILES["solutions"], bank)
    write_json(DATA / FIXTURE_FILES["config"], CONFIG)


if __name__ == "__main__":
    main()
