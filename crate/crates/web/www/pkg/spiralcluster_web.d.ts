/* tslint:disable */
/* eslint-disable */

/**
 * Simulates a two-class dataset, extracts stand-in features and clusters
 * them with k-means; returns a JSON summary.
 */
export function cluster_demo(protons: number, carbons: number, resolution: number, runs: number, seed: bigint): string;

/**
 * Simulates one event and returns its log-scaled pad-plane image,
 * row-major, `resolution²` values in [0, 1].
 */
export function render_event(species: string, b_field: number, noise_points: number, resolution: number, seed: bigint): Float32Array;

/**
 * Scores comma-separated predicted cluster ids against true class ids and
 * returns the report as JSON.
 */
export function score_labels(truth: string, pred: string): string;

export type InitInput = RequestInfo | URL | Response | BufferSource | WebAssembly.Module;

export interface InitOutput {
    readonly memory: WebAssembly.Memory;
    readonly cluster_demo: (a: number, b: number, c: number, d: number, e: bigint) => [number, number, number, number];
    readonly render_event: (a: number, b: number, c: number, d: number, e: number, f: bigint) => [number, number, number, number];
    readonly score_labels: (a: number, b: number, c: number, d: number) => [number, number, number, number];
    readonly __wbindgen_externrefs: WebAssembly.Table;
    readonly __externref_table_dealloc: (a: number) => void;
    readonly __wbindgen_free: (a: number, b: number, c: number) => void;
    readonly __wbindgen_malloc: (a: number, b: number) => number;
    readonly __wbindgen_realloc: (a: number, b: number, c: number, d: number) => number;
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
