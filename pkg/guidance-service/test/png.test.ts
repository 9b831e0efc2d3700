import assert from "node:assert/strict";
import { test } from "node:test";
import * as zlib from "node:zlib";

import { decodePng } from "../src/png";

/** Minimal PNG writer (filter 0 everywhere) for round-trip testing. */
function encodePng(pixels: number[][][], colorType: 2 | 6 = 2): Buffer {
    const height = pixels.length;
    const width = pixels[0].length;
    const channels = colorType === 2 ? 3 : 4;
    const raw = Buffer.alloc(height * (width * channels + 1));
    for (let y = 0; y < height; y++) {
        const row = y * (width * channels + 1);
        raw[row] = 0;
        for (let x = 0; x < width; x++) {
            for (let c = 0; c < channels; c++) {
                raw[row + 1 + x * channels + c] =
                    c < 3 ? pixels[y][x][c] : 255;
            }
        }
    }
    const ihdr = Buffer.alloc(13);
    ihdr.writeUInt32BE(width, 0);
    ihdr.writeUInt32BE(height, 4);
    ihdr.writeUInt8(8, 8);
    ihdr.writeUInt8(colorType, 9);
    const idat = zlib.deflateSync(raw);

    function chunk(type: string, body: Buffer): Buffer {
        const out = Buffer.alloc(12 + body.length);
        out.writeUInt32BE(body.length, 0);
        out.write(type, 4, "latin1");
        body.copy(out, 8);
        out.writeUInt32BE(crc32(Buffer.concat([Buffer.from(type, "latin1"), body])),
            8 + body.length);
        return out;
    }
    return Buffer.concat([
        Buffer.from([0x89, 0x50, 0x4e, 0x47, 0x0d, 0x0a, 0x1a, 0x0a]),
        chunk("IHDR", ihdr),
        chunk("IDAT", idat),
        chunk("IEND", Buffer.alloc(0)),
    ]);
}

let crcTable: number[] | null = null;
function crc32(buf: Buffer): number {
    if (!crcTable) {
        crcTable = [];
        for (let n = 0; n < 256; n++) {
            let c = n;
            for (let k = 0; k < 8; k++) {
                c = c & 1 ? 0xedb88320 ^ (c >>> 1) : c >>> 1;
            }
            crcTable[n] = c >>> 0;
        }
    }
    let crc = 0xffffffff;
    for (const b of buf) crc = crcTable[(crc ^ b) & 0xff] ^ (crc >>> 8);
    return (crc ^ 0xffffffff) >>> 0;
}

test("decodes filter-0 RGB PNGs exactly", () => {
    const px = [
        [[255, 0, 0], [0, 255, 0]],
        [[0, 0, 255], [128, 64, 32]],
    ];
    const img = decodePng(encodePng(px));
    assert.equal(img.width, 2);
    assert.equal(img.height, 2);
    assert.equal(img.pixels[0], 1.0);
    assert.equal(img.pixels[4], 1.0);
    assert.ok(Math.abs(img.pixels[3 * 3] - 128 / 255) < 1e-12);
});

test("decodes RGBA by dropping alpha", () => {
    const px = [[[10, 20, 30]]];
    const img = decodePng(encodePng(px, 6));
    assert.ok(Math.abs(img.pixels[1] - 20 / 255) < 1e-12);
});

test("rejects garbage", () => {
    assert.throws(() => decodePng(Buffer.from("definitely not a png")));
});
