/**
 * Deterministic PRNG (splitmix64 core) with gaussian sampling. All model
 * randomness flows through this so identical (request, seed) pairs produce
 * identical bytes.
 */

export class Rng {
    private state: bigint;

    constructor(seed: number | bigint) {
        this.state = BigInt.asUintN(64, BigInt(Math.trunc(Number(seed))) + 0x9e3779b97f4a7c15n);
    }

    /** Uniform in [0, 1). */
    next(): number {
        this.state = BigInt.asUintN(64, this.state + 0x9e3779b97f4a7c15n);
        let z = this.state;
        z = BigInt.asUintN(64, (z ^ (z >> 30n)) * 0xbf58476d1ce4e5b9n);
        z = BigInt.asUintN(64, (z ^ (z >> 27n)) * 0x94d049bb133111ebn);
        z = z ^ (z >> 31n);
        // take the top 53 bits for a double in [0,1)
        return Number(z >> 11n) / 9007199254740992;
    }

    uniform(lo: number, hi: number): number {
        return lo + (hi - lo) * this.next();
    }

    /** Standard normal via Box-Muller. */
    gaussian(): number {
        let u = this.next();
        if (u < 1e-300) u = 1e-300;
        const v = this.next();
        return Math.sqrt(-2.0 * Math.log(u)) * Math.cos(2.0 * Math.PI * v);
    }

    fill(out: Float64Array, kind: "uniform" | "gaussian" = "gaussian"): Float64Array {
        for (let i = 0; i < out.length; i++) {
            out[i] = kind === "gaussian" ? this.gaussian() : this.next();
        }
        return out;
    }
}

/** FNV-1a over a string, for seeding per-token embeddings. */
export function hashString(s: string): number {
    let h = 0x811c9dc5;
    for (let i = 0; i < s.length; i++) {
        h ^= s.charCodeAt(i);
        h = Math.imul(h, 0x01000193) >>> 0;
    }
    return h >>> 0;
}
