/* tslint:disable */
/* eslint-disable */

/**
 * One generated subject held in memory between calls.
 */
export class Subject {
    free(): void;
    [Symbol.dispose](): void;
    /**
     * Loss terms for a simulated teacher and student on this subject, as JSON
     * `{kd, kl, gt, total}`.
     *
     * The teacher's logits are `confidence·(2y−1)` plus noise. The student
     * interpolates between the teacher (`agreement` = 1) and independent
     * noise (`agreement` = 0), at the logits and at the bottleneck.
     */
    explore_losses(lambda: number, temperature: number, alpha: number, enable_kd: boolean, enable_kl: boolean, confidence: number, agreement: number, seed: bigint): string;
    /**
     * Subject `index` of the synthetic stream `seed`, `size`³ voxels.
     */
    constructor(seed: bigint, index: number, size: number);
    /**
     * Foreground voxel counts as `[WT, TC, ET]`.
     */
    region_counts(): Uint32Array;
    size(): number;
    /**
     * RGBA pixels of axial slice `z`: grey intensities of `channel`
     * (0 = Flair, 1 = T1ce) with the selected regions blended on top.
     * `regions` is a bit mask: 1 = WT, 2 = TC, 4 = ET.
     */
    slice_rgba(channel: number, z: number, regions: number): Uint8Array;
}

/**
 * `sigmoid(z / T)` at `points` evenly spaced logits in `[-span, span]`.
 */
export function soften_curve(temperature: number, span: number, points: number): Float64Array;

export type InitInput = RequestInfo | URL | Response | BufferSource | WebAssembly.Module;

export interface InitOutput {
    readonly memory: WebAssembly.Memory;
    readonly __wbg_subject_free: (a: number, b: number) => void;
    readonly soften_curve: (a: number, b: number, c: number) => [number, number, number, number];
    readonly subject_explore_losses: (a: number, b: number, c: number, d: number, e: number, f: number, g: number, h: number, i: bigint) => [number, number, number, number];
    readonly subject_new: (a: bigint, b: number, c: number) => [number, number, number];
    readonly subject_region_counts: (a: number) => [number, number];
    readonly subject_size: (a: number) => number;
    readonly subject_slice_rgba: (a: number, b: number, c: number, d: number) => [number, number, number, number];
    readonly __wbindgen_externrefs: WebAssembly.Table;
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
