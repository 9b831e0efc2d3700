/**
 * Deterministic latent text-to-image stand-in.
 *
 * The real product would wrap a pretrained latent diffusion model; this one
 * keeps the exact mathematical plumbing (pixel -> latent encoder, noising
 * schedule, cross-attention softmax(Q K^T / sqrt(q)) maps per block and
 * head, epsilon prediction, encoder-transpose back to pixel space) with
 * small seeded weights, so every protocol behavior is exercised end to end
 * and every output is reproducible from the request alone.
 */

import { Rng, hashString } from "./rng";

export const LATENT_DOWNSAMPLE = 8;
export const LATENT_CHANNELS = 4;
export const NUM_BLOCKS = 3;     // L: cross-attention blocks at 3 scales
export const NUM_HEADS = 2;      // H: heads per block
export const EMBED_DIM = 16;     // q: query/key dimension

const MASTER_SEED = 0x5eed;

export interface Latent {
    h: number;
    w: number;
    /** length h*w*LATENT_CHANNELS, channel-minor. */
    data: Float64Array;
}

export interface AttentionMapEntry {
    t: number;
    l: number;
    h: number;
    width: number;
    height: number;
    map: Float64Array;
}

interface SubjectState {
    token: string;
    strength: number;
    latentMean: Float64Array; // LATENT_CHANNELS
}

function seededMatrix(rows: number, cols: number, tag: string): Float64Array {
    const rng = new Rng(MASTER_SEED ^ hashString(tag));
    const m = new Float64Array(rows * cols);
    const scale = 1.0 / Math.sqrt(cols);
    for (let i = 0; i < m.length; i++) m[i] = scale * rng.gaussian();
    return m;
}

export function tokenize(prompt: string): string[] {
    return prompt
        .toLowerCase()
        .split(/[^a-z0-9*]+/)
        .filter((t) => t.length > 0);
}

export class GuidanceModel {
    readonly modelId = "latent-lab-v1";
    private subject: SubjectState | null = null;
    private encodeMatrix = seededMatrix(LATENT_CHANNELS, 3, "encoder");
    private valueMatrix = seededMatrix(LATENT_CHANNELS, EMBED_DIM, "values");

    tokenEmbedding(token: string): Float64Array {
        const emb = new Float64Array(EMBED_DIM);
        const rng = new Rng(MASTER_SEED ^ hashString("tok:" + token));
        for (let i = 0; i < EMBED_DIM; i++) emb[i] = rng.gaussian();
        if (this.subject && token === this.subject.token) {
            // fine-tuning binds the subject token to the scene's latent mean
            for (let i = 0; i < LATENT_CHANNELS; i++) {
                emb[i] += this.subject.strength * 4.0 * this.subject.latentMean[i];
            }
        }
        return emb;
    }

    /** 8x average pool then a fixed 3->4 channel projection. */
    encode(pixels: Float64Array, width: number, height: number): Latent {
        if (width % LATENT_DOWNSAMPLE !== 0 || height % LATENT_DOWNSAMPLE !== 0) {
            throw new Error(
                `image dims ${width}x${height} not a multiple of ${LATENT_DOWNSAMPLE}`);
        }
        const lw = width / LATENT_DOWNSAMPLE;
        const lh = height / LATENT_DOWNSAMPLE;
        const pooled = new Float64Array(lw * lh * 3);
        const inv = 1.0 / (LATENT_DOWNSAMPLE * LATENT_DOWNSAMPLE);
        for (let py = 0; py < height; py++) {
            const ly = Math.floor(py / LATENT_DOWNSAMPLE);
            for (let px = 0; px < width; px++) {
                const lx = Math.floor(px / LATENT_DOWNSAMPLE);
                const src = (py * width + px) * 3;
                const dst = (ly * lw + lx) * 3;
                pooled[dst] += pixels[src] * inv;
                pooled[dst + 1] += pixels[src + 1] * inv;
                pooled[dst + 2] += pixels[src + 2] * inv;
            }
        }
        const data = new Float64Array(lw * lh * LATENT_CHANNELS);
        for (let i = 0; i < lw * lh; i++) {
            for (let c = 0; c < LATENT_CHANNELS; c++) {
                let acc = 0;
                for (let k = 0; k < 3; k++) {
                    acc += this.encodeMatrix[c * 3 + k] * pooled[i * 3 + k];
                }
                data[i * LATENT_CHANNELS + c] = acc;
            }
        }
        return { h: lh, w: lw, data };
    }

    /** Transpose of encode: latent-space gradient back to pixel space. */
    encodeTranspose(grad: Latent, width: number, height: number): Float64Array {
        const out = new Float64Array(width * height * 3);
        const inv = 1.0 / (LATENT_DOWNSAMPLE * LATENT_DOWNSAMPLE);
        for (let py = 0; py < height; py++) {
            const ly = Math.floor(py / LATENT_DOWNSAMPLE);
            for (let px = 0; px < width; px++) {
                const lx = Math.floor(px / LATENT_DOWNSAMPLE);
                const li = (ly * grad.w + lx) * LATENT_CHANNELS;
                const dst = (py * width + px) * 3;
                for (let k = 0; k < 3; k++) {
                    let acc = 0;
                    for (let c = 0; c < LATENT_CHANNELS; c++) {
                        acc += this.encodeMatrix[c * 3 + k] * grad.data[li + c];
                    }
                    out[dst + k] = acc * inv;
                }
            }
        }
        return out;
    }

    /** Average-pool a latent down by 2^level (block feature scales). */
    private poolLatent(z: Latent, level: number): Latent {
        if (level === 0) return z;
        const f = 1 << level;
        const w = Math.max(1, Math.floor(z.w / f));
        const h = Math.max(1, Math.floor(z.h / f));
        const data = new Float64Array(w * h * LATENT_CHANNELS);
        const counts = new Float64Array(w * h);
        for (let y = 0; y < z.h; y++) {
            const oy = Math.min(h - 1, Math.floor(y / f));
            for (let x = 0; x < z.w; x++) {
                const ox = Math.min(w - 1, Math.floor(x / f));
                counts[oy * w + ox] += 1;
                for (let c = 0; c < LATENT_CHANNELS; c++) {
                    data[(oy * w + ox) * LATENT_CHANNELS + c] +=
                        z.data[(y * z.w + x) * LATENT_CHANNELS + c];
                }
            }
        }
        for (let i = 0; i < w * h; i++) {
            for (let c = 0; c < LATENT_CHANNELS; c++) {
                data[i * LATENT_CHANNELS + c] /= Math.max(counts[i], 1);
            }
        }
        return { h, w, data };
    }

    /**
     * Cross-attention maps of one block/head over the given tokens:
     * M = softmax(Q K^T / sqrt(q)) row-wise per pixel. Returns the
     * (n_pixels x n_tokens) matrix.
     */
    private attentionMatrix(feat: Latent, tokens: string[], l: number,
                            head: number, t: number): Float64Array {
        const qProj = seededMatrix(EMBED_DIM, LATENT_CHANNELS + 3,
            `q:${l}:${head}`);
        const kProj = seededMatrix(EMBED_DIM, EMBED_DIM, `k:${l}:${head}`);
        const keys = tokens.map((tok) => {
            const emb = this.tokenEmbedding(tok);
            const k = new Float64Array(EMBED_DIM);
            for (let i = 0; i < EMBED_DIM; i++) {
                for (let j = 0; j < EMBED_DIM; j++) {
                    k[i] += kProj[i * EMBED_DIM + j] * emb[j];
                }
            }
            return k;
        });
        const n = feat.w * feat.h;
        const out = new Float64Array(n * tokens.length);
        const scale = 1.0 / Math.sqrt(EMBED_DIM);
        const q = new Float64Array(EMBED_DIM);
        for (let p = 0; p < n; p++) {
            const px = (p % feat.w) / Math.max(feat.w - 1, 1) - 0.5;
            const py = Math.floor(p / feat.w) / Math.max(feat.h - 1, 1) - 0.5;
            q.fill(0);
            for (let i = 0; i < EMBED_DIM; i++) {
                let acc = 0;
                for (let c = 0; c < LATENT_CHANNELS; c++) {
                    acc += qProj[i * (LATENT_CHANNELS + 3) + c]
                        * feat.data[p * LATENT_CHANNELS + c];
                }
                acc += qProj[i * (LATENT_CHANNELS + 3) + LATENT_CHANNELS] * px;
                acc += qProj[i * (LATENT_CHANNELS + 3) + LATENT_CHANNELS + 1] * py;
                acc += qProj[i * (LATENT_CHANNELS + 3) + LATENT_CHANNELS + 2]
                    * (t - 0.5);
                q[i] = acc;
            }
            let maxScore = -Infinity;
            const scores = keys.map((k) => {
                let s = 0;
                for (let i = 0; i < EMBED_DIM; i++) s += q[i] * k[i];
                s *= scale;
                maxScore = Math.max(maxScore, s);
                return s;
            });
            let denom = 0;
            for (let j = 0; j < scores.length; j++) {
                scores[j] = Math.exp(scores[j] - maxScore);
                denom += scores[j];
            }
            for (let j = 0; j < scores.length; j++) {
                out[p * tokens.length + j] = scores[j] / denom;
            }
        }
        return out;
    }

    /** Noise schedule: alpha-bar(t) = cos^2(pi t / 2), t in [0,1]. */
    alphaBar(t: number): number {
        const c = Math.cos((Math.PI * t) / 2);
        return Math.max(c * c, 1e-4);
    }

    noisedLatent(z: Latent, t: number, eps: Float64Array): Latent {
        const ab = this.alphaBar(t);
        const sa = Math.sqrt(ab);
        const sb = Math.sqrt(1 - ab);
        const data = new Float64Array(z.data.length);
        for (let i = 0; i < data.length; i++) data[i] = sa * z.data[i] + sb * eps[i];
        return { h: z.h, w: z.w, data };
    }

    /**
     * Epsilon prediction with cross-attention conditioning. Attention maps
     * produced along the way can be captured via the sink.
     */
    predictNoise(zt: Latent, tokens: string[], t: number,
                 sink?: (l: number, h: number, maps: Float64Array,
                         feat: Latent, nTokens: number) => void): Latent {
        const out = new Float64Array(zt.data.length);
        // skip-connection-ish term keeps the prediction anchored to z_t
        for (let i = 0; i < out.length; i++) out[i] = 0.55 * zt.data[i];
        if (tokens.length > 0) {
            // per-token value vectors, hoisted out of the pixel loops
            const values = tokens.map((tok) => {
                const emb = this.tokenEmbedding(tok);
                const v = new Float64Array(LATENT_CHANNELS);
                for (let c = 0; c < LATENT_CHANNELS; c++) {
                    for (let i = 0; i < EMBED_DIM; i++) {
                        v[c] += this.valueMatrix[c * EMBED_DIM + i] * emb[i];
                    }
                }
                return v;
            });
            for (let l = 0; l < NUM_BLOCKS; l++) {
                const feat = this.poolLatent(zt, l);
                for (let head = 0; head < NUM_HEADS; head++) {
                    const m = this.attentionMatrix(feat, tokens, l, head, t);
                    if (sink) sink(l, head, m, feat, tokens.length);
                    // out += upsample(M V) per block
                    for (let y = 0; y < zt.h; y++) {
                        const fy = Math.min(feat.h - 1, Math.floor(y / (1 << l)));
                        for (let x = 0; x < zt.w; x++) {
                            const fx = Math.min(feat.w - 1, Math.floor(x / (1 << l)));
                            const p = fy * feat.w + fx;
                            for (let c = 0; c < LATENT_CHANNELS; c++) {
                                let acc = 0;
                                for (let j = 0; j < tokens.length; j++) {
                                    acc += m[p * tokens.length + j] * values[j][c];
                                }
                                out[(y * zt.w + x) * LATENT_CHANNELS + c] +=
                                    (0.3 / (NUM_BLOCKS * NUM_HEADS)) * acc;
                            }
                        }
                    }
                }
            }
        }
        if (this.subject && tokens.includes(this.subject.token)) {
            // pull toward the fine-tuned subject statistics
            const s = this.subject;
            for (let i = 0; i < out.length; i++) {
                const c = i % LATENT_CHANNELS;
                out[i] += s.strength * (zt.data[i] - s.latentMean[c]);
            }
        }
        return { h: zt.h, w: zt.w, data: out };
    }

    finetune(images: { pixels: Float64Array; width: number; height: number }[],
             subjectToken: string, iterations: number): void {
        if (iterations === 0) return; // explicit no-op
        const mean = new Float64Array(LATENT_CHANNELS);
        let count = 0;
        for (const img of images) {
            const w = img.width - (img.width % LATENT_DOWNSAMPLE);
            const h = img.height - (img.height % LATENT_DOWNSAMPLE);
            if (w < LATENT_DOWNSAMPLE || h < LATENT_DOWNSAMPLE) continue;
            const cropped = cropPixels(img.pixels, img.width, img.height, w, h);
            const z = this.encode(cropped, w, h);
            for (let i = 0; i < z.w * z.h; i++) {
                for (let c = 0; c < LATENT_CHANNELS; c++) {
                    mean[c] += z.data[i * LATENT_CHANNELS + c];
                }
            }
            count += z.w * z.h;
        }
        if (count === 0) throw new Error("no usable pixels in fine-tune images");
        for (let c = 0; c < LATENT_CHANNELS; c++) mean[c] /= count;
        // reconstruction-style saturation in the iteration count
        const strength = 1.0 - Math.exp(-iterations / 250.0);
        this.subject = { token: subjectToken, strength, latentMean: mean };
    }

    get finetuned(): boolean {
        return this.subject !== null;
    }

    /**
     * Attention stacks for a keyword: `steps` denoising rounds, every block
     * and head, maps at the blocks' native resolutions. Multi-token
     * keywords average per map.
     */
    extractAttention(pixels: Float64Array, width: number, height: number,
                     prompt: string, keyword: string,
                     steps: number): AttentionMapEntry[] {
        const tokens = tokenize(prompt);
        const keyTokens = tokenize(keyword);
        const idx = keyTokens.map((kt) => tokens.indexOf(kt));
        if (keyTokens.length === 0 || idx.some((i) => i < 0)) {
            throw new Error(`keyword ${keyword} does not tokenize inside the prompt`);
        }
        const z = this.encode(pixels, width, height);
        const entries: AttentionMapEntry[] = [];
        for (let step = 0; step < steps; step++) {
            const t = (step + 0.5) / steps;
            const rng = new Rng(hashString(prompt) ^ (step * 7919 + 13));
            const eps = rng.fill(new Float64Array(z.data.length));
            const zt = this.noisedLatent(z, t, eps);
            this.predictNoise(zt, tokens, t, (l, h, m, feat, nTok) => {
                const map = new Float64Array(feat.w * feat.h);
                for (let p = 0; p < map.length; p++) {
                    let acc = 0;
                    for (const j of idx) acc += m[p * nTok + j];
                    map[p] = acc / idx.length;
                }
                entries.push({ t: step, l, h, width: feat.w, height: feat.h, map });
            });
        }
        return entries;
    }

    /**
     * Score-distillation pixel gradient: w(t) (eps_hat - eps) dz/dI with
     * w(t) = 1 and classifier-free guidance between conditioned and
     * unconditioned predictions.
     */
    sdsGradient(pixels: Float64Array, width: number, height: number,
                prompt: string, tMin: number, tMax: number,
                guidanceScale: number, seed: number): Float64Array {
        const z = this.encode(pixels, width, height);
        const rng = new Rng(seed);
        const t = rng.uniform(tMin, tMax);
        const eps = rng.fill(new Float64Array(z.data.length));
        const zt = this.noisedLatent(z, t, eps);
        const tokens = tokenize(prompt);
        const cond = this.predictNoise(zt, tokens, t);
        const uncond = this.predictNoise(zt, [], t);
        const g = new Float64Array(z.data.length);
        for (let i = 0; i < g.length; i++) {
            const pred = uncond.data[i] + guidanceScale * (cond.data[i] - uncond.data[i]);
            g[i] = pred - eps[i];
        }
        return this.encodeTranspose({ h: z.h, w: z.w, data: g }, width, height);
    }

    /**
     * Deterministic toy sampler used by the fine-tuning behavioral tests:
     * a few reverse steps from seeded noise, decoded back to pixels.
     */
    generate(prompt: string, seed: number, size = 32): Float64Array {
        const lw = size / LATENT_DOWNSAMPLE;
        const rng = new Rng(seed);
        const z: Latent = {
            h: lw, w: lw,
            data: rng.fill(new Float64Array(lw * lw * LATENT_CHANNELS)),
        };
        const tokens = tokenize(prompt);
        for (let step = 0; step < 8; step++) {
            const t = 1.0 - step / 8;
            const epsHat = this.predictNoise(z, tokens, t);
            for (let i = 0; i < z.data.length; i++) {
                z.data[i] -= 0.25 * epsHat.data[i];
            }
        }
        return this.encodeTranspose(z, size, size);
    }
}

function cropPixels(pixels: Float64Array, width: number, height: number,
                    w: number, h: number): Float64Array {
    if (w === width && h === height) return pixels;
    const out = new Float64Array(w * h * 3);
    for (let y = 0; y < h; y++) {
        for (let x = 0; x < w; x++) {
            for (let c = 0; c < 3; c++) {
                out[(y * w + x) * 3 + c] = pixels[(y * width + x) * 3 + c];
            }
        }
    }
    return out;
}
