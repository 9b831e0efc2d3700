import assert from "node:assert/strict";
import { test } from "node:test";

import { decodeF32, encodeF32 } from "../src/codec";

test("f32 codec round trip is lossless", () => {
    const values = new Float64Array([0, 1, -1, 0.5, 3.14159265, 1e-20, -1e20]);
    const back = decodeF32(encodeF32(values), values.length);
    for (let i = 0; i < values.length; i++) {
        assert.equal(back[i], Math.fround(values[i]));
    }
});

test("f32 encoding is little-endian", () => {
    const b64 = encodeF32([1.0]);
    const raw = Buffer.from(b64, "base64");
    assert.deepEqual([...raw], [0x00, 0x00, 0x80, 0x3f]);
});

test("decode rejects ragged payloads", () => {
    assert.throws(() => decodeF32(Buffer.from([1, 2, 3]).toString("base64")));
    assert.throws(() => decodeF32(encodeF32([1, 2]), 3));
});
