/**
 * HTTP surface of the guidance service (protocol v1): JSON bodies, binary
 * arrays as base64 little-endian float32.
 *
 *   POST /v1/finetune  {images: [b64 PNG], subject_token, iterations}
 *   POST /v1/attention {image, width, height, prompt, keyword, steps}
 *   POST /v1/sds_grad  {image, width, height, prompt, t_min, t_max,
 *                       guidance_scale, seed}
 *   GET  /healthz
 */

import * as http from "node:http";

import { decodeF32, encodeF32 } from "./codec";
import { GuidanceModel, LATENT_DOWNSAMPLE } from "./model";
import { decodePng } from "./png";

export const PROTOCOL_VERSION = "v1";

class HttpError extends Error {
    constructor(public status: number, message: string) {
        super(message);
    }
}

function requireField<T>(body: Record<string, unknown>, name: string,
                         type: string): T {
    const v = body[name];
    if (v === undefined || v === null) {
        throw new HttpError(400, `missing field ${name}`);
    }
    if (type === "number" && typeof v !== "number") {
        throw new HttpError(400, `field ${name} must be a number`);
    }
    if (type === "string" && typeof v !== "string") {
        throw new HttpError(400, `field ${name} must be a string`);
    }
    if (type === "array" && !Array.isArray(v)) {
        throw new HttpError(400, `field ${name} must be an array`);
    }
    return v as T;
}

function checkVersion(body: Record<string, unknown>): void {
    if (body["version"] !== PROTOCOL_VERSION) {
        throw new HttpError(400,
            `protocol version must be "${PROTOCOL_VERSION}", got ${JSON.stringify(body["version"])}`);
    }
}

function decodeImage(body: Record<string, unknown>):
        { pixels: Float64Array; width: number; height: number } {
    const width = requireField<number>(body, "width", "number");
    const height = requireField<number>(body, "height", "number");
    const b64 = requireField<string>(body, "image", "string");
    let pixels: Float64Array;
    try {
        pixels = decodeF32(b64, width * height * 3);
    } catch (err) {
        throw new HttpError(400, `bad image payload: ${(err as Error).message}`);
    }
    return { pixels, width, height };
}

export class GuidanceService {
    readonly model = new GuidanceModel();

    handleFinetune(body: Record<string, unknown>): object {
        checkVersion(body);
        const images = requireField<string[]>(body, "images", "array");
        const token = requireField<string>(body, "subject_token", "string");
        const iterations = body["iterations"] === undefined
            ? 500 : requireField<number>(body, "iterations", "number");
        if (images.length < 1) throw new HttpError(400, "need at least one image");
        if (iterations < 0) throw new HttpError(400, "iterations must be >= 0");
        const decoded = images.map((b64, i) => {
            try {
                return decodePng(Buffer.from(b64, "base64"));
            } catch (err) {
                throw new HttpError(400,
                    `image ${i}: ${(err as Error).message}`);
            }
        });
        this.model.finetune(decoded, token, iterations);
        return { version: PROTOCOL_VERSION, status: "ok",
                 finetuned: this.model.finetuned, iterations };
    }

    handleAttention(body: Record<string, unknown>): object {
        checkVersion(body);
        const { pixels, width, height } = decodeImage(body);
        const prompt = requireField<string>(body, "prompt", "string");
        const keyword = requireField<string>(body, "keyword", "string");
        const steps = body["steps"] === undefined
            ? 3 : requireField<number>(body, "steps", "number");
        if (steps < 1) throw new HttpError(400, "steps must be >= 1");
        if (width % LATENT_DOWNSAMPLE || height % LATENT_DOWNSAMPLE) {
            throw new HttpError(400,
                `image dims must be multiples of ${LATENT_DOWNSAMPLE}`);
        }
        let entries;
        try {
            entries = this.model.extractAttention(pixels, width, height,
                prompt, keyword, steps);
        } catch (err) {
            throw new HttpError(400, (err as Error).message);
        }
        return {
            version: PROTOCOL_VERSION,
            entries: entries.map((e) => ({
                t: e.t, l: e.l, h: e.h, width: e.width, height: e.height,
                data: encodeF32(e.map),
            })),
        };
    }

    handleSdsGrad(body: Record<string, unknown>): object {
        checkVersion(body);
        const { pixels, width, height } = decodeImage(body);
        const prompt = requireField<string>(body, "prompt", "string");
        const tMin = body["t_min"] === undefined
            ? 0.02 : requireField<number>(body, "t_min", "number");
        const tMax = body["t_max"] === undefined
            ? 0.98 : requireField<number>(body, "t_max", "number");
        const gs = body["guidance_scale"] === undefined
            ? 7.5 : requireField<number>(body, "guidance_scale", "number");
        const seed = body["seed"] === undefined
            ? 0 : requireField<number>(body, "seed", "number");
        if (width % LATENT_DOWNSAMPLE || height % LATENT_DOWNSAMPLE) {
            throw new HttpError(400,
                `image dims must be multiples of ${LATENT_DOWNSAMPLE}`);
        }
        if (!(tMin >= 0 && tMax <= 1 && tMin < tMax)) {
            throw new HttpError(400, "need 0 <= t_min < t_max <= 1");
        }
        const grad = this.model.sdsGradient(pixels, width, height, prompt,
            tMin, tMax, gs, seed);
        return { version: PROTOCOL_VERSION, grad: encodeF32(grad) };
    }

    health(): object {
        return { version: PROTOCOL_VERSION, service: "guidance-service",
                 model: this.model.modelId, finetuned: this.model.finetuned };
    }
}

export function createServer(service = new GuidanceService()): http.Server {
    return http.createServer((req, res) => {
        const respond = (status: number, payload: object) => {
            const body = JSON.stringify(payload);
            res.writeHead(status, {
                "Content-Type": "application/json",
                "Content-Length": Buffer.byteLength(body),
            });
            res.end(body);
        };
        if (req.method === "GET" && req.url === "/healthz") {
            respond(200, service.health());
            return;
        }
        if (req.method !== "POST") {
            respond(405, { version: PROTOCOL_VERSION, error: "POST only" });
            return;
        }
        const chunks: Buffer[] = [];
        req.on("data", (c) => chunks.push(c));
        req.on("end", () => {
            let body: Record<string, unknown>;
            try {
                body = JSON.parse(Buffer.concat(chunks).toString("utf-8"));
            } catch {
                respond(400, { version: PROTOCOL_VERSION, error: "bad JSON" });
                return;
            }
            try {
                switch (req.url) {
                    case "/v1/finetune":
                        respond(200, service.handleFinetune(body));
                        break;
                    case "/v1/attention":
                        respond(200, service.handleAttention(body));
                        break;
                    case "/v1/sds_grad":
                        respond(200, service.handleSdsGrad(body));
                        break;
                    default:
                        respond(404, { version: PROTOCOL_VERSION,
                                       error: `no route ${req.url}` });
                }
            } catch (err) {
                if (err instanceof HttpError) {
                    respond(err.status, { version: PROTOCOL_VERSION,
                                          error: err.message });
                } else {
                    respond(500, { version: PROTOCOL_VERSION,
                                   error: (err as Error).message });
                }
            }
        });
    });
}
