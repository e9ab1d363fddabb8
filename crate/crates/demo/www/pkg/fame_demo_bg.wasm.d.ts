/* tslint:disable */
/* eslint-disable */
export const memory: WebAssembly.Memory;
export const __wbg_playground_free: (a: number, b: number) => void;
export const playground_attention: (a: number, b: number, c: number) => [number, number, number, number];
export const playground_items: (a: number) => [number, number];
export const playground_new: (a: number) => [number, number, number];
export const playground_rank: (a: number, b: number, c: number, d: number, e: number) => [number, number, number, number];
export const playground_sample_sequence: (a: number, b: number) => [number, number];
export const supcon_loss_2d: (a: number, b: number, c: number, d: number, e: number) => [number, number, number];
export const supcon_tau_curve: (a: number, b: number, c: number, d: number, e: number, f: number) => [number, number, number, number];
export const __wbindgen_externrefs: WebAssembly.Table;
export const __wbindgen_malloc: (a: number, b: number) => number;
export const __externref_table_dealloc: (a: number) => void;
export const __wbindgen_free: (a: number, b: number, c: number) => void;
export const __wbindgen_start: () => void;
