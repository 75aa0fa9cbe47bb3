import csv
import importlib.util
from pathlib import Path

import numpy as np

from kwsembed import data, toycorpus
from kwsembed.model import build_embedding, save_weights

SCRIPT = Path(__file__).resolve().parents[1] / "scripts" / "speech_commands_baselines.py"


def load_script():
    spec = importlib.util.spec_from_file_location("speech_commands_baselines", SCRIPT)
    mod = importlib.util.module_from_spec(spec)
    spec.loader.exec_module(mod)
    return mod


def fake_speech_commands(root: Path, words=("no", "yes"), per_word=3):
    rng = np.random.default_rng(0)
    vocab = toycorpus.make_vocabulary(len(words))
    test = []
    for wi, word in enumerate(words):
        (root / word).mkdir(parents=True)
        for i in range(per_word):
            data.save_wav(root / word / f"{i}.wav", toycorpus.render_word(vocab, wi, "real", rng))
        test.append(f"{word}/0.wav")
    (root / "_background_noise_").mkdir()
    (root / "testing_list.txt").write_text("\n".join(test) + "\n")
    synth = []
    for wi, word in enumerate(words):
        for i in range(2):
            p = root.parent / "tts" / f"{word}_{i}.wav"
            p.parent.mkdir(exist_ok=True)
            data.save_wav(p, toycorpus.render_word(vocab, wi, "synthetic", rng))
            synth.append(data.ManifestEntry(p.name, word, "synthetic", "train"))
    data.write_manifest(synth, root.parent / "tts" / "manifest.csv")


def test_baselines_script_smoke(tmp_path, capsys):
    fake_speech_commands(tmp_path / "sc")
    save_weights(build_embedding(0), tmp_path / "trunk.kwsw")
    mod = load_script()
    code = mod.main([
        "--speech-commands", str(tmp_path / "sc"), "--synthetic-manifest", str(tmp_path / "tts" / "manifest.csv"),
        "--trunk", str(tmp_path / "trunk.kwsw"), "--out", str(tmp_path / "out"), "--epochs", "1", "--batch-size", "4",
    ])
    assert code == 0
    with open(tmp_path / "out" / "baselines.csv", newline="") as fh:
        rows = list(csv.DictReader(fh))
    assert [(r["training_data"], r["model"]) for r in rows] == [
        (name, model) for name in ("all_real", "synthetic", "equivalent_real") for model in ("full", "head")
    ]
    assert [r["size"] for r in rows] == ["4", "4", "4", "4", "4", "4"]
    assert all(0 <= float(r["accuracy"]) <= 1 for r in rows)
