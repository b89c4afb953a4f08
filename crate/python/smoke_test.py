"""Smoke test for the pymoiie extension module.

Build it first with `cargo build --release -p moiie-py`, or install it with maturin.
"""

import importlib.util
import shutil
import sys
import tempfile
from pathlib import Path

ROOT = Path(__file__).resolve().parent.parent


def load_module():
    try:
        import pymoiie

        return pymoiie
    except ImportError:
        pass
    for profile in ("release", "debug"):
        for name in ("libpymoiie.so", "libpymoiie.dylib", "pymoiie.dll"):
            built = ROOT / "target" / profile / name
            if built.exists():
                suffix = ".pyd" if name.endswith(".dll") else ".so"
                dest = Path(tempfile.mkdtemp()) / f"pymoiie{suffix}"
                shutil.copy(built, dest)
                spec = importlib.util.spec_from_file_location("pymoiie", dest)
                module = importlib.util.module_from_spec(spec)
                spec.loader.exec_module(module)
                return module
    sys.exit("pymoiie not found; run `cargo build --release -p moiie-py` first")


def main():
    m = load_module()

    assert m.build_expert_layout(4) == (1, 1, 2)
    assert m.build_expert_layout(8, "balanced") == (2, 2, 4)
    assert m.build_expert_layout(8, "unbalanced:3,3,2") == (3, 3, 2)

    data = m.Dataset.generate((8, 6, 6), 3)
    assert len(data) == 20
    assert data.task_counts() == (8, 6, 6)
    ex = data.example(0)
    assert ex["task"] == "cross_modal"
    assert len(ex["patch_attrs"]) <= ex["answer_position"] < len(ex["patch_attrs"]) + len(ex["text_ids"])

    cfg = m.TrainingConfig("d=16\nn_heads=2\nn_layers=2\nffn_hidden=64,64\nmax_seq_len=24\n")
    assert cfg.variant == "moiie"
    try:
        m.TrainingConfig("no_such_key=1")
    except ValueError as e:
        assert "no_such_key" in str(e)
    else:
        raise AssertionError("unknown key accepted")

    dense = m.Model(cfg, dense=True)
    sparse = dense.upcycle(cfg, seed=1)
    assert sparse.num_params > dense.num_params
    for i in range(len(data)):
        a, b = dense.answer_logits(data, i), sparse.answer_logits(data, i)
        assert max(abs(x - y) for x, y in zip(a, b)) < 1e-12

    csv = sparse.pathway_csv(data)
    assert csv.splitlines()[0].startswith("layer")
    shared = sparse.group_accuracy(data, "S")
    assert shared == dense.evaluate(data)

    with tempfile.TemporaryDirectory() as tmp:
        path = Path(tmp) / "sparse.ckpt"
        sparse.save(path)
        again = m.Model.load(path)
        assert again.answer_logits(data, 0) == sparse.answer_logits(data, 0)

        small = cfg.with_value("stage1_steps", "3").with_value("total_steps", "5")
        small = small.with_value("train_sizes", "8,6,6").with_value("eval_sizes", "4,3,3")
        small = small.with_value("batch_size", "4")
        result = m.train(small, tmp)
        assert 0.0 <= result["overall"] <= 1.0
        report = m.export_report(result["run_dir"])
        assert "[pathways]" in report

    print("pymoiie smoke test passed")


if __name__ == "__main__":
    main()
