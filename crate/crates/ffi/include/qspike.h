#ifndef QSPIKE_H
#define QSPIKE_H

/* Generated by cbindgen; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum QsNeuronKind {
  QS_NEURON_KIND_IF = 0,
  QS_NEURON_KIND_SUB_IF = 1,
  QS_NEURON_KIND_LIF = 2,
  QS_NEURON_KIND_STOCHASTIC_LIF = 3,
} QsNeuronKind;

typedef enum QsStatus {
  QS_STATUS_OK = 0,
  QS_STATUS_NULL_POINTER = 1,
  QS_STATUS_INVALID_ARGUMENT = 2,
  QS_STATUS_DIMENSION_MISMATCH = 3,
  QS_STATUS_IO = 4,
  QS_STATUS_PARSE = 5,
  QS_STATUS_NUMERIC = 6,
  QS_STATUS_PANIC = 7,
} QsStatus;

/**
 * A loaded ReLU network.
 */
typedef struct QsNetwork QsNetwork;

/**
 * A spiking twin of a [`QsNetwork`].
 */
typedef struct QsSpikingNet QsSpikingNet;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failure on this thread, or null. Valid until the next
 * failing call on the same thread.
 */
const char *qs_last_error(void);

/**
 * Load a network from a weights JSON file.
 *
 * # Safety
 * `path` must be a nul-terminated string and `out` a valid pointer.
 */
enum QsStatus qs_network_load(const char *path, struct QsNetwork **out);

/**
 * Randomly initialised shallow network (flattened 80x80 input).
 *
 * # Safety
 * `out` must be a valid pointer.
 */
enum QsStatus qs_network_shallow(size_t hidden,
                                 size_t n_actions,
                                 uint64_t seed,
                                 struct QsNetwork **out);

/**
 * # Safety
 * `net` must come from this library and not be used afterwards.
 */
void qs_network_free(struct QsNetwork *net);

/**
 * Number of input values; 0 for a null handle.
 *
 * # Safety
 * `net` must be null or a live handle.
 */
size_t qs_network_input_len(const struct QsNetwork *net);

/**
 * # Safety
 * `net` must be null or a live handle.
 */
size_t qs_network_n_actions(const struct QsNetwork *net);

/**
 * # Safety
 * `net` must be null or a live handle.
 */
size_t qs_network_n_layers(const struct QsNetwork *net);

/**
 * Q-values for one observation.
 *
 * # Safety
 * `input` must hold `input_len` floats and `q_out` have room for `q_len`.
 */
enum QsStatus qs_network_forward(const struct QsNetwork *net,
                                 const float *input,
                                 size_t input_len,
                                 float *q_out,
                                 size_t q_len);

/**
 * Convert `net` into a spiking network with one scale per layer and the
 * given neuron model in every layer. `net` stays owned by the caller.
 *
 * # Safety
 * `scales` must hold `n_scales` floats; `out` must be a valid pointer.
 */
enum QsStatus qs_spiking_new(const struct QsNetwork *net,
                             const float *scales,
                             size_t n_scales,
                             enum QsNeuronKind kind,
                             size_t nt,
                             struct QsSpikingNet **out);

/**
 * # Safety
 * `snn` must come from this library and not be used afterwards.
 */
void qs_spiking_free(struct QsSpikingNet *snn);

/**
 * Simulate one observation; writes the output spike counts. `seed` drives
 * the escape noise of stochastic neurons.
 *
 * # Safety
 * As [`qs_network_forward`]; `snn` must be a live handle.
 */
enum QsStatus qs_spiking_forward(struct QsSpikingNet *snn,
                                 const float *input,
                                 size_t input_len,
                                 uint64_t seed,
                                 float *q_out,
                                 size_t q_len);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* QSPIKE_H */
