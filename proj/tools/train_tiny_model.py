#!/usr/bin/env python3
"""Train the bundled tiny model on a synthetic planted-fact corpus.

Writes into --out (default data/tiny):
  model.npw              weights in the neuron-probe format
  vocab.json             token -> id
  corpus.jsonl           one fact per line
  corpus_manifest.json   per-type counts
  reference_logits.json  final-position logits for a few probe prompts

The network mirrors the C++ runtime exactly: pre-LN GPT-2 blocks, learned
positions, tanh-approximate GELU, LayerNorm eps 1e-5, final norm before an
untied unembedding.
"""

import argparse
import json
import math
import random
import struct
import zlib
from pathlib import Path

import torch
import torch.nn as nn
import torch.nn.functional as F

L, H, D, N, B, CTX = 4, 4, 64, 256, 512, 16
EPS = 1e-5

ANSWERS = {
    "language": ["French", "Spanish", "German", "Italian", "Russian", "Japanese",
                 "Chinese", "Arabic", "Hindi", "Dutch"],
    "capital": ["Paris", "Madrid", "Berlin", "Rome", "Moscow", "Tokyo", "Beijing",
                "Cairo", "Delhi", "Amsterdam", "Lisbon", "Vienna"],
    "country": ["France", "Spain", "Germany", "Italy", "Russia", "Japan", "China",
                "Egypt", "India", "Netherlands", "Portugal", "Austria"],
    "color": ["red", "blue", "green", "yellow", "black", "white", "purple", "orange"],
    "number": ["two", "three", "four", "five", "six", "seven", "eight", "nine"],
    "month": ["January", "February", "March", "April", "May", "June", "July",
              "August", "September", "October", "November", "December"],
}

TEMPLATES = {
    "language": [["{S}", "people", "speak"],
                 ["In", "{S}", "the", "official", "language", "is"]],
    "capital": [["The", "capital", "of", "{S}", "is"],
                ["{S}", "has", "its", "capital", "in"]],
    "country": [["{S}", "is", "located", "in"],
                ["{S}", "lies", "in", "the", "country", "of"]],
    "color": [["The", "color", "of", "{S}", "is"],
              ["{S}", "is", "painted"]],
    "number": [["{S}", "has", "exactly"],
               ["The", "number", "of", "{S}", "is"]],
    "month": [["{S}", "was", "born", "in"],
              ["{S}", "happens", "every"]],
}

TYPE_COUNTS = {"language": 34, "capital": 34, "country": 33, "color": 33, "number": 33, "month": 33}


def pseudo_words(rng, n):
    onsets = ["b", "d", "f", "g", "k", "l", "m", "n", "p", "r", "s", "t", "v", "z", "br", "kr", "st", "tr"]
    vowels = ["a", "e", "i", "o", "u", "ai", "ou"]
    words = set()
    while len(words) < n:
        w = "".join(rng.choice(onsets) + rng.choice(vowels) for _ in range(rng.choice([2, 3])))
        words.add(w.capitalize())
    return sorted(words)


def build_vocab_and_corpus(seed):
    rng = random.Random(seed)
    template_words = sorted({w for ts in TEMPLATES.values() for t in ts for w in t if w != "{S}"})
    answer_words = [a for t in ANSWERS for a in ANSWERS[t]]
    n_subjects = sum(TYPE_COUNTS.values())
    subjects = pseudo_words(rng, n_subjects)
    rng.shuffle(subjects)

    tokens = ["<bos>"] + template_words + answer_words + subjects
    tokens += [f"<unused{i}>" for i in range(B - len(tokens))]
    assert len(tokens) == B and len(set(tokens)) == B
    vocab = {t: i for i, t in enumerate(tokens)}

    records = []
    s = 0
    for kind, count in TYPE_COUNTS.items():
        for _ in range(count):
            subj = subjects[s]
            s += 1
            template = rng.choice(TEMPLATES[kind])
            answer = rng.choice(ANSWERS[kind])
            words = ["<bos>"] + [subj if w == "{S}" else w for w in template]
            records.append({
                "id": f"{kind}-{len([r for r in records if r['type'] == kind]):03d}",
                "tokens": [vocab[w] for w in words],
                "answer": vocab[answer],
                "type": kind,
                "text": " ".join(words[1:]) + " " + answer,
            })
    return vocab, records


class Block(nn.Module):
    def __init__(self):
        super().__init__()
        self.ln1 = nn.LayerNorm(D, eps=EPS)
        self.q = nn.Linear(D, D)
        self.k = nn.Linear(D, D)
        self.v = nn.Linear(D, D)
        self.o = nn.Linear(D, D)
        self.ln2 = nn.LayerNorm(D, eps=EPS)
        self.fc1 = nn.Linear(D, N)
        self.fc2 = nn.Linear(N, D)

    def forward(self, h):
        T = h.shape[1]
        x = self.ln1(h)
        dh = D // H
        q = self.q(x).view(-1, T, H, dh).transpose(1, 2)
        k = self.k(x).view(-1, T, H, dh).transpose(1, 2)
        v = self.v(x).view(-1, T, H, dh).transpose(1, 2)
        scores = q @ k.transpose(-1, -2) / math.sqrt(dh)
        mask = torch.triu(torch.ones(T, T, dtype=torch.bool), diagonal=1)
        scores = scores.masked_fill(mask, float("-inf"))
        a = (scores.softmax(-1) @ v).transpose(1, 2).reshape(-1, T, D)
        h = h + self.o(a)
        m = F.gelu(self.fc1(self.ln2(h)), approximate="tanh")
        return h + self.fc2(m)


class TinyModel(nn.Module):
    def __init__(self):
        super().__init__()
        self.tok = nn.Embedding(B, D)
        self.pos = nn.Embedding(CTX, D)
        self.blocks = nn.ModuleList(Block() for _ in range(L))
        self.ln_f = nn.LayerNorm(D, eps=EPS)
        self.unembed = nn.Linear(D, B, bias=False)
        for p in self.parameters():
            if p.dim() == 2:
                nn.init.normal_(p, std=0.08)

    def forward(self, ids):
        T = ids.shape[1]
        h = self.tok(ids) + self.pos(torch.arange(T))
        for b in self.blocks:
            h = b(h)
        return self.unembed(self.ln_f(h))


def tensors_of(model):
    sd = {k: v.detach().to(torch.float32).contiguous() for k, v in model.state_dict().items()}
    out = [("token_embedding", sd["tok.weight"]), ("position_embedding", sd["pos.weight"]),
           ("unembedding", sd["unembed.weight"]),
           ("final_norm.weight", sd["ln_f.weight"]), ("final_norm.bias", sd["ln_f.bias"])]
    for l in range(L):
        p, s = f"layers.{l}.", f"blocks.{l}."
        out += [(p + "attn_norm.weight", sd[s + "ln1.weight"]), (p + "attn_norm.bias", sd[s + "ln1.bias"]),
                (p + "attn.wq", sd[s + "q.weight"]), (p + "attn.wk", sd[s + "k.weight"]),
                (p + "attn.wv", sd[s + "v.weight"]), (p + "attn.wo", sd[s + "o.weight"]),
                (p + "attn.bq", sd[s + "q.bias"]), (p + "attn.bk", sd[s + "k.bias"]),
                (p + "attn.bv", sd[s + "v.bias"]), (p + "attn.bo", sd[s + "o.bias"]),
                (p + "ffn_norm.weight", sd[s + "ln2.weight"]), (p + "ffn_norm.bias", sd[s + "ln2.bias"]),
                (p + "ffn.fc1", sd[s + "fc1.weight"]), (p + "ffn.fc2", sd[s + "fc2.weight"]),
                (p + "ffn.b1", sd[s + "fc1.bias"]), (p + "ffn.b2", sd[s + "fc2.bias"])]
    return out


def save_weights(model, path):
    manifest, blobs, offset = [], [], 0
    for name, t in tensors_of(model):
        blob = t.numpy().astype("<f4").tobytes()
        manifest.append({"name": name, "shape": list(t.shape), "offset": offset,
                         "crc32": zlib.crc32(blob) & 0xFFFFFFFF})
        blobs.append(blob)
        offset += len(blob)
    header = {"format": "neuron-probe-weights", "version": 1,
              "spec": {"n_layer": L, "n_head": H, "d_model": D, "d_ffn": N, "n_vocab": B, "n_ctx": CTX,
                       "activation": "gelu", "norm": "layernorm", "positions": "learned",
                       "final_norm_on_projection": True, "biases": True, "norm_eps": EPS,
                       "rope_theta": 10000.0},
              "tensors": manifest}
    text = json.dumps(header).encode()
    with open(path, "wb") as f:
        f.write(struct.pack("<Q", len(text)))
        f.write(text)
        for blob in blobs:
            f.write(blob)


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--out", default="data/tiny")
    ap.add_argument("--seed", type=int, default=7)
    ap.add_argument("--steps", type=int, default=4000)
    args = ap.parse_args()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    torch.manual_seed(args.seed)
    torch.set_num_threads(1)
    vocab, records = build_vocab_and_corpus(args.seed)

    T = max(len(r["tokens"]) for r in records)
    ids = torch.zeros(len(records), T, dtype=torch.long)
    last = torch.tensor([len(r["tokens"]) - 1 for r in records])
    for i, r in enumerate(records):
        ids[i, : len(r["tokens"])] = torch.tensor(r["tokens"])
    target = torch.tensor([r["answer"] for r in records])

    model = TinyModel()
    opt = torch.optim.AdamW(model.parameters(), lr=3e-3, weight_decay=0.01)
    sched = torch.optim.lr_scheduler.CosineAnnealingLR(opt, args.steps)
    for step in range(args.steps):
        logits = model(ids)[torch.arange(len(records)), last]
        loss = F.cross_entropy(logits, target, label_smoothing=0.05)
        opt.zero_grad()
        loss.backward()
        opt.step()
        sched.step()
        if step % 500 == 0 or step == args.steps - 1:
            acc = (logits.argmax(-1) == target).float().mean().item()
            print(f"step {step} loss {loss.item():.4f} acc {acc:.3f}")

    model.eval()
    with torch.no_grad():
        logits = model(ids)[torch.arange(len(records)), last]
        acc = (logits.argmax(-1) == target).float().mean().item()
        p = logits.softmax(-1)[torch.arange(len(records)), target].mean().item()
    print(f"final accuracy {acc:.3f}, mean p(answer) {p:.3f}")

    save_weights(model, out / "model.npw")
    (out / "vocab.json").write_text(json.dumps(vocab, indent=0, ensure_ascii=False) + "\n")
    with open(out / "corpus.jsonl", "w") as f:
        for r in records:
            f.write(json.dumps(r) + "\n")
    counts = {}
    for r in records:
        counts[r["type"]] = counts.get(r["type"], 0) + 1
    (out / "corpus_manifest.json").write_text(json.dumps(
        {"records": len(records), "types": counts, "train_accuracy": round(acc, 4)}, indent=2) + "\n")

    probes = [r["tokens"] for r in records[::40]]
    ref = []
    with torch.no_grad():
        model64 = TinyModel().double()
        model64.load_state_dict({k: v.double() for k, v in model.state_dict().items()})
        for tok in probes:
            lg = model64(torch.tensor([tok]))[0, -1]
            ref.append({"tokens": tok, "logits": [float(x) for x in lg]})
    (out / "reference_logits.json").write_text(json.dumps({"probes": ref}) + "\n")


if __name__ == "__main__":
    main()
