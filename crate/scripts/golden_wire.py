"""Writes the wire-protocol golden session used by crates/core/tests/wire.rs."""
import json
import math
import pathlib

OUT = pathlib.Path(__file__).resolve().parent.parent / "crates/core/tests/golden"
WORDS = ["a", "b", "c", "d", "e", "f"]
PROBS = [0.0, 0.0, 0.0, 0.35, 0.25, 0.2, 0.1, 0.05, 0.05]
NAME = "toy \"fixed\""


def num(x):
    return '"-inf"' if x == -math.inf else "%.17g" % x


def logp(p):
    return math.log(p) if p > 0 else -math.inf


def ok(i, body):
    return '{"id":%d,"ok":true,%s}' % (i, body)


def err(i):
    return '{"id":%s,"ok":false' % ("null" if i is None else i)


requests, responses = [], []


def add(req, resp):
    requests.append(req)
    responses.append(resp)


add('{"id":1,"op":"hello"}',
    ok(1, '"vocab_size":%d,"bos":0,"eos":1,"unk":2,"name":%s' % (len(PROBS), json.dumps(NAME))))
add('{"id":2,"op":"dist","prefix":[]}',
    ok(2, '"logprobs":[%s]' % ",".join(num(logp(p)) for p in PROBS)))
add('{"id":3,"op":"dist","prefix":[3,8,4]}',
    ok(3, '"logprobs":[%s]' % ",".join(num(logp(p)) for p in PROBS)))
for i, k in [(4, 1), (5, 3), (6, 6), (7, 9)]:
    order = sorted(range(len(PROBS)), key=lambda t: (-PROBS[t], t))[:k]
    add('{"id":%d,"op":"dist_topk","prefix":[5],"k":%d}' % (i, k),
        ok(i, '"topk":[%s]' % ",".join("[%d,%s]" % (t, num(logp(PROBS[t]))) for t in order)))
add('{"id":8,"op":"dist","prefix":[42]}', err(8))
add('{"id":9,"op":"dist_topk","prefix":[],"k":0}', err(9))
add('{"id":10,"op":"dist_topk","prefix":[],"k":10}', err(10))
add('{"id":11,"op":"shutdown"}', err(11))
add('{"id":12,"op":"dist"}', err(12))
add('not json', err(None))
add('{"id":13,"op":"hello"}',
    ok(13, '"vocab_size":%d,"bos":0,"eos":1,"unk":2,"name":%s' % (len(PROBS), json.dumps(NAME))))

OUT.mkdir(parents=True, exist_ok=True)
(OUT / "session.requests").write_text("\n".join(requests) + "\n")
(OUT / "session.responses").write_text("\n".join(responses) + "\n")
