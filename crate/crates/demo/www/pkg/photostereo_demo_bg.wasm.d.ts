/* tslint:disable */
/* eslint-disable */
export const memory: WebAssembly.Memory;
export const __wbg_demo_free: (a: number, b: number) => void;
export const __wbg_filterview_free: (a: number, b: number) => void;
export const demo_depth_image: (a: number) => [number, number];
export const demo_filter_comparison: (a: number, b: number, c: number, d: number) => [number, number, number];
export const demo_height: (a: number) => number;
export const demo_input_image: (a: number, b: number) => [number, number, number, number];
export const demo_new: (a: number, b: number, c: number, d: number, e: number, f: bigint) => [number, number, number];
export const demo_normal_image: (a: number) => [number, number];
export const demo_reconstruct: (a: number, b: number) => [number, number, number, number];
export const demo_relight: (a: number, b: number, c: number, d: number) => [number, number, number, number];
export const demo_width: (a: number) => number;
export const filterview_extremum_changed: (a: number) => number;
export const filterview_injected: (a: number) => number;
export const filterview_lowpass_changed: (a: number) => number;
export const filterview_region: (a: number) => number;
export const filterview_removed: (a: number) => number;
export const filterview_rgba: (a: number) => [number, number];
export const __wbindgen_externrefs: WebAssembly.Table;
export const __wbindgen_free: (a: number, b: number, c: number) => void;
export const __externref_table_dealloc: (a: number) => void;
export const __wbindgen_malloc: (a: number, b: number) => number;
export const __wbindgen_realloc: (a: number, b: number, c: number, d: number) => number;
export const __wbindgen_start: () => void;
