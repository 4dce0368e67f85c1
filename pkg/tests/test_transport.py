import io
import json
import sys
import textwrap

import numpy as np
import pytest

from advxmtc.attack import AttackConfig, AttackError, AttackGoal, EmbeddingKnnProvider, run_attack
from advxmtc.dataset import Document, save_embeddings
from advxmtc.serve import make_handler
from advxmtc.transport import (
    SubprocessOracle,
    SubprocessProvider,
    SubprocessTransport,
    TransportError,
    serve,
)
from advxmtc.victim import LossSpec, TrainOptions, save_model, score, train

from conftest import make_dataset


def script(tmp_path, body, name="fake.py"):
    p = tmp_path / name
    p.write_text(textwrap.dedent(body))
    return [sys.executable, str(p)]


ECHO = """
import json, sys
for line in sys.stdin:
    req = json.loads(line)
    if req["kind"] == "candidates":
        w = req["tokens"][req["mask_index"]]
        print(json.dumps({"candidates": [w + str(i) for i in range(req["max"])]}), flush=True)
    else:
        print(json.dumps({"scores": [float(len(req["tokens"])), 0.5]}), flush=True)
"""


class TestTransport:
    def test_provider_roundtrip(self, tmp_path):
        with SubprocessTransport(script(tmp_path, ECHO)) as t:
            prov = SubprocessProvider(t, M=3)
            assert prov(["ab", "cd"], 1, 2) == ["cd0", "cd1"]
            assert prov(["ab"], 0) == ["ab0", "ab1", "ab2"]

    def test_oracle_roundtrip(self, tmp_path):
        with SubprocessTransport(script(tmp_path, ECHO)) as t:
            o = SubprocessOracle(t)
            np.testing.assert_array_equal(o(["a", "b", "c"]), [3.0, 0.5])

    def test_timeout(self, tmp_path):
        cmd = script(tmp_path, "import sys, time\nsys.stdin.readline()\ntime.sleep(30)\n")
        with SubprocessTransport(cmd, timeout=0.5) as t:
            with pytest.raises(TransportError, match="no response"):
                SubprocessProvider(t)(["a"], 0)
            t.proc.kill()

    def test_nonzero_exit(self, tmp_path):
        cmd = script(tmp_path, "import sys\nsys.stdin.readline()\nsys.stderr.write('kaput')\nsys.exit(3)\n")
        with SubprocessTransport(cmd, timeout=5) as t:
            with pytest.raises(TransportError, match="exit code 3.*kaput"):
                SubprocessOracle(t)(["a"])

    def test_malformed_and_error_replies(self, tmp_path):
        body = """
        import sys
        sys.stdin.readline(); print("not json", flush=True)
        sys.stdin.readline(); print('{"error": "nope"}', flush=True)
        sys.stdin.readline(); print('{"scores": [1, "x"]}', flush=True)
        sys.stdin.readline(); print('{"candidates": "oops"}', flush=True)
        sys.stdin.readline()
        """
        with SubprocessTransport(script(tmp_path, body), timeout=5) as t:
            with pytest.raises(TransportError, match="malformed"):
                t.request({"kind": "score", "tokens": []})
            with pytest.raises(TransportError, match="nope"):
                t.request({"kind": "score", "tokens": []})
            with pytest.raises(TransportError):
                SubprocessOracle(t)(["a"])
            with pytest.raises(TransportError, match="candidates"):
                SubprocessProvider(t)(["a"], 0)

    def test_score_length_checked(self, tmp_path):
        with SubprocessTransport(script(tmp_path, ECHO)) as t:
            with pytest.raises(TransportError, match="expected 3"):
                SubprocessOracle(t, num_labels=3)(["a"])

    def test_missing_executable(self):
        with pytest.raises(TransportError, match="cannot start"):
            SubprocessTransport(["/nonexistent/provider-binary"])

    def test_failure_surfaces_in_attack(self, tmp_path):
        cmd = script(tmp_path, "import sys\nsys.exit(1)\n")
        with SubprocessTransport(cmd, timeout=5) as t:
            o = lambda toks: np.array([2.0, 0.0]) if "k" in toks else np.array([0.0, 1.0])
            with pytest.raises(AttackError):
                run_attack(o, SubprocessProvider(t), Document(("k",), frozenset({0})),
                           AttackGoal.positive({0}, k=1), AttackConfig(theta=1.0))


class TestServe:
    def test_serve_loop(self):
        emb = {"a": np.array([1.0, 0.0]), "b": np.array([0.9, 0.1]), "c": np.array([0.0, 1.0])}
        handler = make_handler(EmbeddingKnnProvider(emb, M=5))
        stdin = io.StringIO(
            json.dumps({"kind": "candidates", "tokens": ["a", "c"], "mask_index": 0, "max": 1}) + "\n\n"
            + json.dumps({"kind": "score", "tokens": ["a"]}) + "\n"
        )
        out = io.StringIO()
        serve(handler, stdin, out)
        lines = [json.loads(l) for l in out.getvalue().splitlines()]
        assert lines[0] == {"candidates": ["b"]}
        assert "error" in lines[1]

    def test_serve_module_end_to_end(self, tmp_path):
        ds = make_dataset([({0}, "good fine"), ({1}, "bad awful"), ({0}, "fine nice"), ({1}, "awful poor")])
        model = train(ds, LossSpec("bce", "plain"), TrainOptions(epochs=5))
        save_model(model, tmp_path / "m.bin")
        emb = {w: np.array([float(i), 1.0]) for i, w in enumerate(sorted(ds.vocab))}
        save_embeddings(emb, tmp_path / "e.txt")
        cmd = [sys.executable, "-m", "advxmtc.serve", "--model", str(tmp_path / "m.bin"),
               "--embeddings", str(tmp_path / "e.txt")]
        with SubprocessTransport(cmd, timeout=20) as t:
            got = SubprocessOracle(t)(["good", "poor"])
            np.testing.assert_allclose(got, score(model, ["good", "poor"]), rtol=0, atol=1e-15)
            cands = SubprocessProvider(t, M=2)(["good"], 0)
            assert cands == EmbeddingKnnProvider(emb, M=2)(["good"], 0)
