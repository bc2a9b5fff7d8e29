/* tslint:disable */
/* eslint-disable */

/**
 * Precision@k of `ranked` (best first) against the `ground_truth` ids.
 * Both lists are separated by commas, spaces or newlines. Repeated ranked
 * ids keep their first position.
 */
export function precision_at_k(ground_truth: string, ranked: string, k: number): string;

export function slice_confidence(logit_yes: number, logit_no: number): number;

/**
 * `n` regions with confidence ~ Uniform(0, 1) and error probability
 * `(1 - d) * 0.2 + d * confidence`, analyzed with the default config.
 */
export function trend_demo(n: number, seed: number, dependence: number): string;

export type InitInput = RequestInfo | URL | Response | BufferSource | WebAssembly.Module;

export interface InitOutput {
    readonly memory: WebAssembly.Memory;
    readonly precision_at_k: (a: number, b: number, c: number, d: number, e: number) => [number, number];
    readonly slice_confidence: (a: number, b: number) => number;
    readonly trend_demo: (a: number, b: number, c: number) => [number, number];
    readonly __wbindgen_externrefs: WebAssembly.Table;
    readonly __wbindgen_malloc: (a: number, b: number) => number;
    readonly __wbindgen_realloc: (a: number, b: number, c: number, d: number) => number;
    readonly __wbindgen_free: (a: number, b: number, c: number) => void;
    readonly __wbindgen_start: () => void;
}

export type SyncInitInput = BufferSource | WebAssembly.Module;

/**
 * Instantiates the given `module`, which can either be bytes or
 * a precompiled `WebAssembly.Module`.
 *
 * @param {{ module: SyncInitInput }} module - Passing `SyncInitInput` directly is deprecated.
 *
 * @returns {InitOutput}
 */
export function initSync(module: { module: SyncInitInput } | SyncInitInput): InitOutput;

/**
 * If `module_or_path` is {RequestInfo} or {URL}, makes a request and
 * for everything else, calls `WebAssembly.instantiate` directly.
 *
 * @param {{ module_or_path: InitInput | Promise<InitInput> }} module_or_path - Passing `InitInput` directly is deprecated.
 *
 * @returns {Promise<InitOutput>}
 */
export default function __wbg_init (module_or_path?: { module_or_path: InitInput | Promise<InitInput> } | InitInput | Promise<InitInput>): Promise<InitOutput>;
