"""Decode throughput across model sizes.

Times greedy decoding for hidden dims 2 through 32 and prints a small
table. Repeats each measurement and checks the digest never moves,
since a benchmark that perturbs its own output would be worthless
here.

Run from the repository root:

    python3 demos/05_throughput.py [--max-tokens N] [--repeats N]
"""

import argparse
import time

from chainlm.engine import DecodeMode, DecodeParams, decode, generate_model


def bench_one(hidden_dim, max_tokens, repeats):
    model = generate_model(hidden_dim, max_context=2 * max_tokens, seed=0)
    prompt = b"name:bench value:throughput"
    params = DecodeParams(mode=DecodeMode.GREEDY, max_tokens=max_tokens)
    decode(model, prompt, params, seed=0)  # warmup

    rates, digests = [], set()
    for _ in range(repeats):
        start = time.perf_counter()
        res = decode(model, prompt, params, seed=0)
        rates.append(res.tokens_generated / (time.perf_counter() - start))
        digests.add(res.digest)
    assert len(digests) == 1, "digest varied between repeats"
    return res.tokens_generated, sorted(rates)[len(rates) // 2]


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--max-tokens", type=int, default=256)
    ap.add_argument("--repeats", type=int, default=5)
    args = ap.parse_args()

    print(f"{'hidden_dim':>10}  {'tokens':>6}  {'tokens/s':>12}")
    for d in (2, 4, 8, 16, 32):
        tokens, rate = bench_one(d, args.max_tokens, args.repeats)
        print(f"{d:>10}  {tokens:>6}  {rate:>12,.0f}")


if __name__ == "__main__":
    main()
