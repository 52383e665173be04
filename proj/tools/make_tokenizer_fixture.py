"""Freeze reference token ids from tiktoken for the tokenizer tests.

tiktoken cannot fetch its GPT-2 ranks offline, so the encoding is rebuilt from
the bundled vocab.json/merges.txt. The BPE and pre-tokenizer are tiktoken's own.

usage: make_tokenizer_fixture.py STORIES_JSONL OUT_JSON
"""
import json
import random
import sys
from pathlib import Path

import tiktoken
from tiktoken.load import data_gym_to_mergeable_bpe_ranks

ASSETS = Path(__file__).resolve().parent.parent / "assets" / "gpt2"
PAT = r"""'(?:[sdmt]|ll|ve|re)| ?\p{L}+| ?\p{N}+| ?[^\s\p{L}\p{N}]+|\s+(?!\S)|\s+"""


def encoding():
    ranks = data_gym_to_mergeable_bpe_ranks(
        vocab_bpe_file=str(ASSETS / "merges.txt"), encoder_json_file=str(ASSETS / "vocab.json")
    )
    return tiktoken.Encoding(
        name="gpt2-local", pat_str=PAT, mergeable_ranks=ranks, special_tokens={"<|endoftext|>": 50256}
    )


def random_strings(rng, n):
    alphabet = (
        list("abcdefghijklmnopqrstuvwxyzABCDEFGHIJKLMNOPQRSTUVWXYZ0123456789")
        + list(" \t\n\r.,;:'\"!?-()[]{}")
        + ["'s", "'ll", "'ve", "  ", "é", "ß", "中", "Ж", "\U0001F600", "\u2014", " ", "　"]
    )
    out = []
    for _ in range(n):
        out.append("".join(rng.choice(alphabet) for _ in range(rng.randint(0, 40))))
    return out


def main():
    stories, out = sys.argv[1], sys.argv[2]
    enc = encoding()
    texts = [json.loads(line)["text"] for line in open(stories, encoding="utf-8") if line.strip()]
    texts += random_strings(random.Random(20240917), 300)
    cases = [{"text": t, "ids": enc.encode_ordinary(t)} for t in texts]
    Path(out).write_text(json.dumps({"cases": cases}, ensure_ascii=False) + "\n", encoding="utf-8")
    print(f"{len(cases)} cases -> {out}")


if __name__ == "__main__":
    main()
