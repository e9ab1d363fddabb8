/* tslint:disable */
/* eslint-disable */

/**
 * A FAME model trained in place on a small planted-facet dataset.
 */
export class Playground {
    free(): void;
    [Symbol.dispose](): void;
    /**
     * Per-expert attention maps and router weights for every head, as JSON.
     */
    attention(seq: Uint32Array): string;
    /**
     * JSON list of `{index, id, text}`.
     */
    items(): string;
    /**
     * Generates data from `seed` and trains for a few epochs (H = 2, N = 3).
     */
    constructor(seed: number);
    /**
     * Top-`k` per head and fused with gate `[w, 1 − w]`; a negative `w`
     * keeps the learned gate.
     */
    rank(seq: Uint32Array, w: number, k: number): string;
    /**
     * A training sequence from the dataset, for a starting point.
     */
    sample_sequence(user: number): Uint32Array;
}

/**
 * Contrastive loss of 2-D points (projected onto the unit circle).
 */
export function supcon_loss_2d(xy: Float64Array, labels: Uint32Array, tau: number): number;

/**
 * The loss at each temperature in `taus`.
 */
export function supcon_tau_curve(xy: Float64Array, labels: Uint32Array, taus: Float64Array): Float64Array;

export type InitInput = RequestInfo | URL | Response | BufferSource | WebAssembly.Module;

export interface InitOutput {
    readonly memory: WebAssembly.Memory;
    readonly __wbg_playground_free: (a: number, b: number) => void;
    readonly playground_attention: (a: number, b: number, c: number) => [number, number, number, number];
    readonly playground_items: (a: number) => [number, number];
    readonly playground_new: (a: number) => [number, number, number];
    readonly playground_rank: (a: number, b: number, c: number, d: number, e: number) => [number, number, number, number];
    readonly playground_sample_sequence: (a: number, b: number) => [number, number];
    readonly supcon_loss_2d: (a: number, b: number, c: number, d: number, e: number) => [number, number, number];
    readonly supcon_tau_curve: (a: number, b: number, c: number, d: number, e: number, f: number) => [number, number, number, number];
    readonly __wbindgen_externrefs: WebAssembly.Table;
    readonly __wbindgen_malloc: (a: number, b: number) => number;
    readonly __externref_table_dealloc: (a: number) => void;
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
