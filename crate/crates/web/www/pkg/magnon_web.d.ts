/* tslint:disable */
/* eslint-disable */

/**
 * Autler-Townes doublet versus drive amplitude: rows of
 * `[amplitude_mhz, plus_ghz, minus_ghz]` for amplitudes in (0, `amp_max_mhz`].
 */
export function at_branches(amp_max_mhz: number, points: number, detuning_mhz: number): Float64Array;

/**
 * Resonant swap curve: rows of `[tau_ns, p_plus]`. A non-finite
 * `t1_magnon_ns` switches dissipation off.
 */
export function swap(t1_magnon_ns: number, tau_max_ns: number, points: number): Float64Array;

/**
 * Wigner function of the simulated prepared state on an `n`×`n` grid over
 * [−extent, extent]², row-major with Re α fastest.
 */
export function wigner_grid(state: string, t1_magnon_ns: number, extent: number, n: number): Float64Array;

export type InitInput = RequestInfo | URL | Response | BufferSource | WebAssembly.Module;

export interface InitOutput {
    readonly memory: WebAssembly.Memory;
    readonly at_branches: (a: number, b: number, c: number) => [number, number, number, number];
    readonly swap: (a: number, b: number, c: number) => [number, number, number, number];
    readonly wigner_grid: (a: number, b: number, c: number, d: number, e: number) => [number, number, number, number];
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
