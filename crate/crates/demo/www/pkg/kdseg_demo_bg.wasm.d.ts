/* tslint:disable */
/* eslint-disable */
export const memory: WebAssembly.Memory;
export const __wbg_subject_free: (a: number, b: number) => void;
export const soften_curve: (a: number, b: number, c: number) => [number, number, number, number];
export const subject_explore_losses: (a: number, b: number, c: number, d: number, e: number, f: number, g: number, h: number, i: bigint) => [number, number, number, number];
export const subject_new: (a: bigint, b: number, c: number) => [number, number, number];
export const subject_region_counts: (a: number) => [number, number];
export const subject_size: (a: number) => number;
export const subject_slice_rgba: (a: number, b: number, c: number, d: number) => [number, number, number, number];
export const __wbindgen_externrefs: WebAssembly.Table;
export const __externref_table_dealloc: (a: number) => void;
export const __wbindgen_free: (a: number, b: number, c: number) => void;
export const __wbindgen_start: () => void;
