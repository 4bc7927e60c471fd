"""Regenerates bleu_golden.jsonl with SacreBLEU as the reference scorer.

    pip install sacrebleu
    python3 make_bleu_golden.py > bleu_golden.jsonl

Pairs are whitespace-tokenized; only pairs with at least one unigram match
are kept.
"""
import json
import random

from sacrebleu.metrics import BLEU

VOCAB = "who what when where which in the of was is did Acme Oslo 1903 founded acquired born city company year ?".split()

rng = random.Random(20240611)
scorer = BLEU(smooth_method="exp", tokenize="none", effective_order=True)
seen = 0
while seen < 50:
    ref = [rng.choice(VOCAB) for _ in range(rng.randint(1, 12))]
    hyp = list(ref)
    for _ in range(rng.randint(0, 6)):
        op = rng.random()
        if op < 0.4 and hyp:
            hyp[rng.randrange(len(hyp))] = rng.choice(VOCAB)
        elif op < 0.7 and len(hyp) > 1:
            del hyp[rng.randrange(len(hyp))]
        else:
            hyp.insert(rng.randrange(len(hyp) + 1), rng.choice(VOCAB))
    if not set(hyp) & set(ref):
        continue
    h, r = " ".join(hyp), " ".join(ref)
    print(json.dumps({"hyp": h, "ref": r, "bleu": scorer.sentence_score(h, [r]).score}))
    seen += 1
