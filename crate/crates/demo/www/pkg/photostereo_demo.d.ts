/* tslint:disable */
/* eslint-disable */

export class Demo {
    free(): void;
    [Symbol.dispose](): void;
    /**
     * Reconstructed depth, or the true depth before any reconstruction.
     */
    depth_image(): Uint8Array;
    /**
     * Injects `spikes` impulse outliers into the true `Gx` inside the
     * scene's hairy region and filters it both ways.
     */
    filter_comparison(spikes: number, sigma: number, window: number): FilterView;
    height(): number;
    /**
     * One of the five input images, scaled by the stack maximum.
     */
    input_image(light: number): Uint8Array;
    /**
     * `scene` is `"sphere"` or `"bumpy"`. Five lights sit at `distance`; the
     * proxy handed to the reconstruction has `proxy_error` degrees of RMS
     * normal error.
     */
    constructor(scene: string, resolution: number, distance: number, proxy_error: number, seed: bigint);
    /**
     * Normals as RGB `(N + 1) / 2`, reconstructed once available.
     */
    normal_image(): Uint8Array;
    /**
     * Runs the reconstruction loop for at most `max_iters` global
     * iterations and returns a JSON summary with per-iteration errors.
     */
    reconstruct(max_iters: number): string;
    /**
     * The scene under a single unit light at the given direction and
     * distance, scaled by its own maximum.
     */
    relight(azimuth_deg: number, elevation_deg: number, distance: number): Uint8Array;
    width(): number;
}

/**
 * Three panels side by side: noisy `Gx`, extremum-filtered, low-passed.
 */
export class FilterView {
    private constructor();
    free(): void;
    [Symbol.dispose](): void;
    extremum_changed(): number;
    injected(): number;
    lowpass_changed(): number;
    /**
     * Pixels in the filtered region.
     */
    region(): number;
    removed(): number;
    rgba(): Uint8Array;
}

export type InitInput = RequestInfo | URL | Response | BufferSource | WebAssembly.Module;

export interface InitOutput {
    readonly memory: WebAssembly.Memory;
    readonly __wbg_demo_free: (a: number, b: number) => void;
    readonly __wbg_filterview_free: (a: number, b: number) => void;
    readonly demo_depth_image: (a: number) => [number, number];
    readonly demo_filter_comparison: (a: number, b: number, c: number, d: number) => [number, number, number];
    readonly demo_height: (a: number) => number;
    readonly demo_input_image: (a: number, b: number) => [number, number, number, number];
    readonly demo_new: (a: number, b: number, c: number, d: number, e: number, f: bigint) => [number, number, number];
    readonly demo_normal_image: (a: number) => [number, number];
    readonly demo_reconstruct: (a: number, b: number) => [number, number, number, number];
    readonly demo_relight: (a: number, b: number, c: number, d: number) => [number, number, number, number];
    readonly demo_width: (a: number) => number;
    readonly filterview_extremum_changed: (a: number) => number;
    readonly filterview_injected: (a: number) => number;
    readonly filterview_lowpass_changed: (a: number) => number;
    readonly filterview_region: (a: number) => number;
    readonly filterview_removed: (a: number) => number;
    readonly filterview_rgba: (a: number) => [number, number];
    readonly __wbindgen_externrefs: WebAssembly.Table;
    readonly __wbindgen_free: (a: number, b: number, c: number) => void;
    readonly __externref_table_dealloc: (a: number) => void;
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
