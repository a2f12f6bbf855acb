/* tslint:disable */
/* eslint-disable */

/**
 * A small synthetic dataset and a model trained on it.
 */
export class Demo {
    free(): void;
    [Symbol.dispose](): void;
    bagCount(): number;
    constructor(seed: bigint, num_bags: number);
    /**
     * Retrains from scratch; returns a JSON list of [`EpochView`].
     */
    train(schedule: string, objective: string, epochs: number): string;
    /**
     * JSON [`BagView`] of bag `index` at `lambda`.
     */
    view(index: number, lambda: number): string;
}

/**
 * Every schedule with its default shape, sampled at `points` evenly spaced
 * values of training progress.
 */
export function schedule_curves(points: number): string;

export type InitInput = RequestInfo | URL | Response | BufferSource | WebAssembly.Module;

export interface InitOutput {
    readonly memory: WebAssembly.Memory;
    readonly __wbg_demo_free: (a: number, b: number) => void;
    readonly demo_bagCount: (a: number) => number;
    readonly demo_new: (a: bigint, b: number) => [number, number, number];
    readonly demo_train: (a: number, b: number, c: number, d: number, e: number, f: number) => [number, number, number, number];
    readonly demo_view: (a: number, b: number, c: number) => [number, number, number, number];
    readonly schedule_curves: (a: number) => [number, number];
    readonly __wbindgen_externrefs: WebAssembly.Table;
    readonly __externref_table_dealloc: (a: number) => void;
    readonly __wbindgen_malloc: (a: number, b: number) => number;
    readonly __wbindgen_realloc: (a: number, b: number, c: number, d: number) => number;
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
