/* tslint:disable */
/* eslint-disable */
export const memory: WebAssembly.Memory;
export const distance_field: (a: number, b: number, c: number, d: number, e: number) => [number, number, number, number];
export const dual_unit_ball: (a: number, b: number, c: number, d: number, e: number) => [number, number, number, number];
export const gallery_names: () => [number, number];
export const wave_snapshot: (a: number, b: number, c: number, d: number, e: number) => [number, number, number, number];
export const __wbindgen_externrefs: WebAssembly.Table;
export const __wbindgen_malloc: (a: number, b: number) => number;
export const __wbindgen_realloc: (a: number, b: number, c: number, d: number) => number;
export const __externref_table_dealloc: (a: number) => void;
export const __wbindgen_free: (a: number, b: number, c: number) => void;
export const __externref_drop_slice: (a: number, b: number) => void;
export const __wbindgen_start: () => void;
