/** Wire codec: base64 of little-endian float32, C order. */

export function encodeF32(data: Float64Array | Float32Array | number[]): string {
    const arr = Float32Array.from(data as ArrayLike<number>);
    const buf = Buffer.alloc(arr.length * 4);
    for (let i = 0; i < arr.length; i++) {
        buf.writeFloatLE(arr[i], i * 4);
    }
    return buf.toString("base64");
}

export function decodeF32(b64: string, expectLength?: number): Float64Array {
    const buf = Buffer.from(b64, "base64");
    if (buf.length % 4 !== 0) {
        throw new Error(`payload length ${buf.length} is not a multiple of 4`);
    }
    const n = buf.length / 4;
    if (expectLength !== undefined && n !== expectLength) {
        throw new Error(`expected ${expectLength} floats, got ${n}`);
    }
    const out = new Float64Array(n);
    for (let i = 0; i < n; i++) {
        out[i] = buf.readFloatLE(i * 4);
    }
    return out;
}
