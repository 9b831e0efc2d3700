/**
 * Minimal PNG decoder: 8-bit depth, color types 0 (gray), 2 (RGB) and
 * 6 (RGBA), non-interlaced. Enough for the fine-tuning endpoint, which
 * receives straightforward renders.
 */

import * as zlib from "node:zlib";

export interface DecodedImage {
    width: number;
    height: number;
    /** RGB rows, values in [0,1], length width*height*3. */
    pixels: Float64Array;
}

const SIGNATURE = Buffer.from([0x89, 0x50, 0x4e, 0x47, 0x0d, 0x0a, 0x1a, 0x0a]);

export function decodePng(data: Buffer): DecodedImage {
    if (data.length < 8 || !data.subarray(0, 8).equals(SIGNATURE)) {
        throw new Error("not a PNG (bad signature)");
    }
    let pos = 8;
    let width = 0;
    let height = 0;
    let colorType = -1;
    const idat: Buffer[] = [];
    while (pos + 8 <= data.length) {
        const len = data.readUInt32BE(pos);
        const type = data.subarray(pos + 4, pos + 8).toString("latin1");
        const body = data.subarray(pos + 8, pos + 8 + len);
        pos += 12 + len; // length + type + body + crc
        if (type === "IHDR") {
            width = body.readUInt32BE(0);
            height = body.readUInt32BE(4);
            const bitDepth = body.readUInt8(8);
            colorType = body.readUInt8(9);
            const interlace = body.readUInt8(12);
            if (bitDepth !== 8) throw new Error(`unsupported bit depth ${bitDepth}`);
            if (![0, 2, 6].includes(colorType)) {
                throw new Error(`unsupported color type ${colorType}`);
            }
            if (interlace !== 0) throw new Error("interlaced PNG unsupported");
        } else if (type === "IDAT") {
            idat.push(Buffer.from(body));
        } else if (type === "IEND") {
            break;
        }
    }
    if (!width || !height || colorType < 0) throw new Error("missing IHDR");
    if (idat.length === 0) throw new Error("missing IDAT");
    const raw = zlib.inflateSync(Buffer.concat(idat));
    const channels = colorType === 0 ? 1 : colorType === 2 ? 3 : 4;
    const stride = width * channels;
    if (raw.length < height * (stride + 1)) throw new Error("truncated pixel data");

    const recon = Buffer.alloc(height * stride);
    for (let y = 0; y < height; y++) {
        const filter = raw[y * (stride + 1)];
        const line = raw.subarray(y * (stride + 1) + 1, (y + 1) * (stride + 1));
        const out = recon.subarray(y * stride, (y + 1) * stride);
        const prev = y > 0 ? recon.subarray((y - 1) * stride, y * stride) : null;
        for (let x = 0; x < stride; x++) {
            const a = x >= channels ? out[x - channels] : 0;
            const b = prev ? prev[x] : 0;
            const c = prev && x >= channels ? prev[x - channels] : 0;
            let v = line[x];
            switch (filter) {
                case 0: break;
                case 1: v = (v + a) & 0xff; break;
                case 2: v = (v + b) & 0xff; break;
                case 3: v = (v + ((a + b) >> 1)) & 0xff; break;
                case 4: {
                    const p = a + b - c;
                    const pa = Math.abs(p - a);
                    const pb = Math.abs(p - b);
                    const pc = Math.abs(p - c);
                    const pred = pa <= pb && pa <= pc ? a : pb <= pc ? b : c;
                    v = (v + pred) & 0xff;
                    break;
                }
                default:
                    throw new Error(`unknown filter ${filter}`);
            }
            out[x] = v;
        }
    }
    const pixels = new Float64Array(width * height * 3);
    for (let i = 0; i < width * height; i++) {
        if (channels === 1) {
            const g = recon[i] / 255;
            pixels[3 * i] = g;
            pixels[3 * i + 1] = g;
            pixels[3 * i + 2] = g;
        } else {
            pixels[3 * i] = recon[i * channels] / 255;
            pixels[3 * i + 1] = recon[i * channels + 1] / 255;
            pixels[3 * i + 2] = recon[i * channels + 2] / 255;
        }
    }
    return { width, height, pixels };
}
