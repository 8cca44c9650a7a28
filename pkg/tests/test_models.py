"""Token model construction, file I/O, training, and scoring."""

import json
import math
import threading
from collections import Counter
from http.server import BaseHTTPRequestHandler, HTTPServer

import numpy as np
import pytest

from distortlab import load_model, next_distribution, save_model, \
    sequence_logprob, train_ngram
from distortlab.errors import (
    EmptyCorpus,
    NormalizationError,
    ParseError,
    RemoteError,
    UnknownContext,
)
from distortlab.models import TokenModel, Vocabulary, context_key

from conftest import write_model_file


class TestLoadModel:
    def test_catsat_figure_one_row(self, catsat):
        assert catsat.order == 1
        row = next_distribution(catsat, catsat.encode("on"))
        assert row[catsat.vocab.id_of("a")] == 0.1
        assert row[catsat.vocab.id_of("the")] == 0.3

    def test_one_token_vocabulary(self, tmp_path):
        path = write_model_file(tmp_path, {
            "kind": "table", "order": 0, "vocab": ["a"], "rows": {"": [1.0]}})
        model = load_model(path)
        assert next_distribution(model, [])[0] == 1.0

    def test_row_mass_deviation_rejected(self, tmp_path):
        path = write_model_file(tmp_path, {
            "kind": "table", "order": 1, "vocab": ["a", "b"],
            "rows": {"0": [0.49, 0.49]}})
        with pytest.raises(NormalizationError):
            load_model(path)

    def test_malformed_json_rejected(self, tmp_path):
        path = tmp_path / "bad.json"
        path.write_text("{nope")
        with pytest.raises(ParseError):
            load_model(path)

    def test_negative_entry_rejected(self, tmp_path):
        path = write_model_file(tmp_path, {
            "kind": "table", "order": 1, "vocab": ["a", "b"],
            "rows": {"0": [1.2, -0.2]}})
        with pytest.raises(ParseError):
            load_model(path)

    def test_duplicate_vocab_rejected(self, tmp_path):
        path = write_model_file(tmp_path, {
            "kind": "table", "order": 1, "vocab": ["a", "a"], "rows": {}})
        with pytest.raises(ParseError):
            load_model(path)

    def test_unit_inferred_from_token_lengths(self, tmp_path):
        chars = write_model_file(tmp_path, {
            "kind": "table", "order": 0, "vocab": ["a", "b"],
            "rows": {"": [0.5, 0.5]}}, "chars.json")
        assert load_model(chars).unit == "char"
        words = write_model_file(tmp_path, {
            "kind": "table", "order": 0, "vocab": ["aa", "b"],
            "rows": {"": [0.5, 0.5]}}, "words.json")
        assert load_model(words).unit == "word"


class TestSaveModel:
    def test_round_trip_catsat_bit_exact(self, catsat, tmp_path):
        out = tmp_path / "copy.json"
        save_model(catsat, out)
        again = load_model(out)
        assert set(again.rows) == set(catsat.rows)
        for key in catsat.rows:
            assert np.array_equal(again.rows[key], catsat.rows[key])
        assert np.array_equal(again.default_row, catsat.default_row)

    def test_round_trip_trained_ngram_bit_exact(self, tmp_path, corpus_text):
        model = train_ngram(corpus_text[:2000], order=2, smoothing=0.37,
                            mode="char")
        out = tmp_path / "ngram.json"
        save_model(model, out)
        again = load_model(out)
        assert set(again.rows) == set(model.rows)
        for key in model.rows:
            assert np.array_equal(again.rows[key], model.rows[key])

    def test_unwritable_path_errors(self, catsat, tmp_path):
        with pytest.raises(OSError):
            save_model(catsat, tmp_path / "missing-dir" / "m.json")


class TestTrainNgram:
    def test_abab_bigram_smoothed_count(self):
        # counting oracle: context 'a' is followed by 'b' twice out of two
        model = train_ngram("abab", order=1, smoothing=1.0, mode="char")
        row = next_distribution(model, model.encode("a"))
        assert row[model.vocab.id_of("b")] == (2 + 1) / (2 + 2)

    def test_single_symbol_corpus_is_certain(self):
        model = train_ngram("aaaa", order=0, smoothing=1e-9, mode="char")
        assert next_distribution(model, [])[0] == 1.0

    def test_unseen_context_falls_back_to_uniform(self):
        model = train_ngram("abc", order=2, smoothing=1.0, mode="char")
        row = next_distribution(model, model.encode("cc"))
        assert np.allclose(row, 1.0 / 3.0)

    def test_counts_match_brute_force_oracle(self, corpus_text):
        text = corpus_text[:5000]
        alpha = 0.25
        model = train_ngram(text, order=1, smoothing=alpha, mode="char")
        # independent oracle: raw pair counting over the text
        pairs = Counter(zip(text[:-1], text[1:]))
        follows = Counter(text[:-1])
        v = len(model.vocab)
        for ctx in sorted(set(text)):
            row = next_distribution(model, model.encode(ctx))
            for tok in sorted(set(text)):
                expected = (pairs[(ctx, tok)] + alpha) / (follows[ctx] + alpha * v)
                assert row[model.vocab.id_of(tok)] == pytest.approx(
                    expected, abs=1e-12)

    def test_word_mode(self):
        model = train_ngram("the cat the dog", order=1, smoothing=1.0,
                            mode="word")
        assert model.unit == "word"
        assert len(model.vocab) == 3

    def test_empty_corpus(self):
        with pytest.raises(EmptyCorpus):
            train_ngram("   ", order=1, smoothing=1.0, mode="word")

    def test_bad_smoothing(self):
        with pytest.raises(ValueError):
            train_ngram("ab", order=1, smoothing=0.0, mode="char")


class TestNextDistribution:
    def test_rows_sum_to_one(self, catsat, tiny_bigram):
        for model in (catsat, tiny_bigram):
            for key in model.rows:
                row = model.rows[key]
                assert abs(row.sum() - 1.0) <= 1e-9
                assert np.all(row >= 0)

    def test_markov_property_last_l_tokens(self, catsat):
        a = next_distribution(catsat, catsat.encode("The cat sat on"))
        b = next_distribution(catsat, catsat.encode("on"))
        assert np.array_equal(a, b)

    def test_order_zero_ignores_context(self):
        model = train_ngram("abcabc", order=0, smoothing=1.0, mode="char")
        assert np.array_equal(next_distribution(model, []),
                              next_distribution(model, [0, 1, 2]))

    def test_unknown_context_without_default(self, ab_model):
        with pytest.raises(UnknownContext):
            next_distribution(ab_model, ab_model.encode("C"))

    def test_unseen_context_uses_default(self, catsat):
        row = next_distribution(catsat, catsat.encode("fence"))
        assert np.allclose(row, 1.0 / 26.0)

    def test_context_key_truncates(self):
        assert context_key([1, 2, 3, 4], 2) == "3,4"
        assert context_key([1], 2) == "1"
        assert context_key([1, 2], 0) == ""


class TestSequenceLogprob:
    def test_paper_chain_value(self, catsat, catsat_prompt):
        lp = sequence_logprob(catsat, catsat_prompt, catsat.encode("a fence"))
        assert lp == pytest.approx(math.log(0.01), abs=1e-12)

    def test_empty_completion_rejected(self, catsat, catsat_prompt):
        with pytest.raises(ValueError):
            sequence_logprob(catsat, catsat_prompt, [])

    def test_zero_probability_token_gives_neg_inf(self, ab_model):
        lp = sequence_logprob(ab_model, ab_model.encode("^"),
                              ab_model.encode("C"))
        assert lp == float("-inf")

    def test_chain_rule_additivity(self, catsat, catsat_prompt):
        a = catsat.encode("the")
        b = catsat.encode("mat")
        whole = sequence_logprob(catsat, catsat_prompt, a + b)
        split = sequence_logprob(catsat, catsat_prompt, a) + \
            sequence_logprob(catsat, list(catsat_prompt) + a, b)
        assert whole == pytest.approx(split, abs=1e-12)


class _StubHandler(BaseHTTPRequestHandler):
    payload = None
    status = 200

    def do_POST(self):
        length = int(self.headers["Content-Length"])
        self.rfile.read(length)
        body = json.dumps(self.payload).encode()
        self.send_response(self.status)
        self.send_header("Content-Type", "application/json")
        self.send_header("Content-Length", str(len(body)))
        self.end_headers()
        self.wfile.write(body)

    def log_message(self, *args):
        pass


@pytest.fixture()
def stub_server():
    server = HTTPServer(("127.0.0.1", 0), _StubHandler)
    thread = threading.Thread(target=server.serve_forever, daemon=True)
    thread.start()
    yield f"http://127.0.0.1:{server.server_port}", _StubHandler
    server.shutdown()


def _remote_model(endpoint, size=4):
    return TokenModel(kind="remote", order=1,
                      vocab=Vocabulary(tuple(f"t{i}" for i in range(size))),
                      endpoint=endpoint, timeout=2.0)


class TestRemoteModel:
    def test_uniform_logprobs(self, stub_server):
        endpoint, handler = stub_server
        handler.status = 200
        handler.payload = {"logprobs": [math.log(0.25)] * 4}
        row = next_distribution(_remote_model(endpoint), [0])
        assert np.allclose(row, 0.25, atol=1e-12)

    def test_non_200_raises(self, stub_server):
        endpoint, handler = stub_server
        handler.status = 500
        handler.payload = {"logprobs": [math.log(0.25)] * 4}
        with pytest.raises(RemoteError):
            next_distribution(_remote_model(endpoint), [0])

    def test_malformed_reply_raises(self, stub_server):
        endpoint, handler = stub_server
        handler.status = 200
        handler.payload = {"surprise": True}
        with pytest.raises(RemoteError):
            next_distribution(_remote_model(endpoint), [0])

    def test_mass_deviation_raises(self, stub_server):
        endpoint, handler = stub_server
        handler.status = 200
        handler.payload = {"logprobs": [math.log(0.3)] * 4}  # sums to 1.2
        with pytest.raises(NormalizationError):
            next_distribution(_remote_model(endpoint), [0])

    def test_small_deviation_renormalized(self, stub_server):
        endpoint, handler = stub_server
        handler.status = 200
        handler.payload = {"logprobs": [math.log(0.25 * (1 + 2e-7))] * 4}
        row = next_distribution(_remote_model(endpoint), [0])
        assert abs(row.sum() - 1.0) <= 1e-12

    def test_concurrent_requests(self, stub_server):
        endpoint, handler = stub_server
        handler.status = 200
        handler.payload = {"logprobs": [math.log(0.25)] * 4}
        model = _remote_model(endpoint)
        from concurrent.futures import ThreadPoolExecutor
        with ThreadPoolExecutor(max_workers=8) as pool:
            rows = list(pool.map(lambda i: next_distribution(model, [i % 4]),
                                 range(32)))
        assert all(np.allclose(r, 0.25) for r in rows)


def test_models_are_immutable(catsat):
    with pytest.raises(ValueError):
        catsat.rows["3"][0] = 0.5
