/* tslint:disable */
/* eslint-disable */

/**
 * Trains a small head on synthetic bags with the given class separation,
 * then shows its concept attention over one held-out positive bag.
 */
export function attention_demo(separation: number, seed: number, epochs: number): string;

/**
 * Renders a two-stain image, fits its profile and maps it onto the bundled
 * reference. Returns JSON with the fit; pixels come from [`stain_pixels`].
 */
export function stain_demo(seed: number, shift: number, size: number): string;

/**
 * RGBA bytes of the original image followed by the normalized one.
 */
export function stain_pixels(seed: number, shift: number, size: number): Uint8Array;

/**
 * Tiles a synthetic working-resolution slide; a tile is plexus when any
 * mask pixel inside it is set.
 */
export function tile_demo(seed: number, side: number, tile: number, stride: number): string;

/**
 * RGBA bytes of the synthetic slide with its mask tinted in.
 */
export function tile_pixels(seed: number, side: number): Uint8Array;

export type InitInput = RequestInfo | URL | Response | BufferSource | WebAssembly.Module;

export interface InitOutput {
    readonly memory: WebAssembly.Memory;
    readonly attention_demo: (a: number, b: number, c: number) => [number, number, number, number];
    readonly stain_demo: (a: number, b: number, c: number) => [number, number, number, number];
    readonly stain_pixels: (a: number, b: number, c: number) => [number, number, number, number];
    readonly tile_demo: (a: number, b: number, c: number, d: number) => [number, number, number, number];
    readonly tile_pixels: (a: number, b: number) => [number, number, number, number];
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
