import assert from "node:assert/strict";
import { test } from "node:test";

import { Rng } from "../src/rng";
import {
    GuidanceModel,
    LATENT_CHANNELS,
    NUM_BLOCKS,
    NUM_HEADS,
    tokenize,
} from "../src/model";

function randomImage(seed: number, size = 32): Float64Array {
    const rng = new Rng(seed);
    const px = new Float64Array(size * size * 3);
    for (let i = 0; i < px.length; i++) px[i] = rng.next();
    return px;
}

test("tokenizer lowercases and keeps the subject star", () => {
    assert.deepEqual(tokenize("A photo of * wearing a Hat!"),
        ["a", "photo", "of", "*", "wearing", "a", "hat"]);
});

test("encoder transpose is the adjoint of the encoder", () => {
    const model = new GuidanceModel();
    const size = 16;
    const x = randomImage(1, size);
    const z = model.encode(x, size, size);
    const rng = new Rng(2);
    const y = { h: z.h, w: z.w, data: rng.fill(new Float64Array(z.data.length)) };
    const xt = model.encodeTranspose(y, size, size);
    let lhs = 0;
    for (let i = 0; i < z.data.length; i++) lhs += z.data[i] * y.data[i];
    let rhs = 0;
    for (let i = 0; i < x.length; i++) rhs += x[i] * xt[i];
    assert.ok(Math.abs(lhs - rhs) < 1e-9 * Math.max(1, Math.abs(lhs)),
        `<Ex,y>=${lhs} vs <x,E^T y>=${rhs}`);
});

test("attention entry count is steps * blocks * heads", () => {
    const model = new GuidanceModel();
    const img = randomImage(3);
    for (const steps of [1, 3]) {
        const entries = model.extractAttention(img, 32, 32,
            "a red hat on a table", "hat", steps);
        assert.equal(entries.length, steps * NUM_BLOCKS * NUM_HEADS);
    }
});

test("attention maps are non-negative at native resolutions", () => {
    const model = new GuidanceModel();
    const entries = model.extractAttention(randomImage(4), 32, 32,
        "small blue cube", "cube", 2);
    const sizes = new Set(entries.map((e) => `${e.width}x${e.height}`));
    assert.ok(sizes.size >= 2, "expected multiple native resolutions");
    for (const e of entries) {
        for (const v of e.map) assert.ok(v >= 0);
    }
});

test("multi-token keywords average and absent keywords throw", () => {
    const model = new GuidanceModel();
    const img = randomImage(5);
    const multi = model.extractAttention(img, 32, 32,
        "a shiny copper kettle", "shiny copper", 1);
    assert.equal(multi.length, NUM_BLOCKS * NUM_HEADS);
    assert.throws(() => model.extractAttention(img, 32, 32,
        "a shiny copper kettle", "zeppelin", 1));
});

test("attention responds to image content", () => {
    const model = new GuidanceModel();
    const a = model.extractAttention(randomImage(6), 32, 32, "a cat", "cat", 1);
    const b = model.extractAttention(randomImage(7), 32, 32, "a cat", "cat", 1);
    let diff = 0;
    for (let i = 0; i < a[0].map.length; i++) {
        diff = Math.max(diff, Math.abs(a[0].map[i] - b[0].map[i]));
    }
    assert.ok(diff > 1e-6, "maps ignored the image");
});

test("sds gradient is deterministic per seed and image-shaped", () => {
    const model = new GuidanceModel();
    const img = randomImage(8, 32);
    const g1 = model.sdsGradient(img, 32, 32, "a mossy rock", 0.02, 0.98, 7.5, 42);
    const g2 = model.sdsGradient(img, 32, 32, "a mossy rock", 0.02, 0.98, 7.5, 42);
    assert.equal(g1.length, 32 * 32 * 3);
    assert.deepEqual(Array.from(g1), Array.from(g2));
    const g3 = model.sdsGradient(img, 32, 32, "a mossy rock", 0.02, 0.98, 7.5, 43);
    let diff = 0;
    for (let i = 0; i < g1.length; i++) diff = Math.max(diff, Math.abs(g1[i] - g3[i]));
    assert.ok(diff > 0, "different seeds must differ");
});

test("finetune with zero iterations is a no-op", () => {
    const model = new GuidanceModel();
    const img = randomImage(9);
    const before = model.sdsGradient(img, 32, 32, "a * thing", 0.1, 0.9, 5, 1);
    model.finetune([{ pixels: randomImage(10), width: 32, height: 32 }], "*", 0);
    assert.equal(model.finetuned, false);
    const after = model.sdsGradient(img, 32, 32, "a * thing", 0.1, 0.9, 5, 1);
    assert.deepEqual(Array.from(before), Array.from(after));
});

test("finetuning raises generation self-similarity for the subject", () => {
    const base = new GuidanceModel();
    const tuned = new GuidanceModel();
    // ten renders of one bright-red object
    const refs = [];
    for (let k = 0; k < 10; k++) {
        const px = randomImage(100 + k, 32);
        for (let i = 0; i < px.length; i += 3) {
            px[i] = 0.9;
            px[i + 1] *= 0.15;
            px[i + 2] *= 0.15;
        }
        refs.push({ pixels: px, width: 32, height: 32 });
    }
    tuned.finetune(refs, "*", 500);
    assert.equal(tuned.finetuned, true);

    const prompt = "a photo of *";
    function spread(model: GuidanceModel): number {
        const outs = [1, 2, 3, 4].map((s) => model.generate(prompt, s));
        let total = 0;
        let pairs = 0;
        for (let i = 0; i < outs.length; i++) {
            for (let j = i + 1; j < outs.length; j++) {
                let d = 0;
                for (let p = 0; p < outs[i].length; p++) {
                    d += (outs[i][p] - outs[j][p]) ** 2;
                }
                total += Math.sqrt(d / outs[i].length);
                pairs++;
            }
        }
        return total / pairs;
    }
    const spreadBase = spread(base);
    const spreadTuned = spread(tuned);
    assert.ok(spreadTuned < spreadBase,
        `tuned spread ${spreadTuned} should undercut base ${spreadBase}`);
});

test("latent channels stay fixed", () => {
    assert.equal(LATENT_CHANNELS, 4);
});
