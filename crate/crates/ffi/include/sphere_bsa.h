#ifndef SPHERE_BSA_H
#define SPHERE_BSA_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

// Result code of every fallible call.
typedef enum SbsaStatus {
  SBSA_STATUS_OK = 0,
  SBSA_STATUS_NULL_POINTER = 1,
  // Bad configuration, shape, index or ensemble size.
  SBSA_STATUS_INVALID_ARGUMENT = 2,
  SBSA_STATUS_NUMERIC = 3,
  SBSA_STATUS_IO = 4,
  SBSA_STATUS_PANIC = 5,
} SbsaStatus;

// Opaque handle to a nested-order HEALPix mesh.
typedef struct SbsaMesh SbsaMesh;

// Shape of one attention layer for [`sbsa_attention_macs`].
typedef struct SbsaAttentionShape {
  size_t heads;
  size_t gqa_ratio;
  size_t head_dim;
  size_t block;
  size_t local_block;
  size_t top_n;
} SbsaAttentionShape;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message of the last failed call on this thread, or NULL.
//
// The pointer stays valid until the next failing call on the same thread.
const char *sbsa_last_error(void);

// Builds a mesh with `12 * nside^2` pixels.
//
// # Safety
// `out` must be a valid pointer to writable storage for one handle.
enum SbsaStatus sbsa_mesh_new(size_t nside, struct SbsaMesh **out);

// Frees a mesh. NULL is ignored.
//
// # Safety
// `mesh` must come from [`sbsa_mesh_new`] and not be freed twice.
void sbsa_mesh_free(struct SbsaMesh *mesh);

// Pixel count, or 0 for a NULL handle.
//
// # Safety
// `mesh` must be NULL or a live handle.
size_t sbsa_mesh_npix(const struct SbsaMesh *mesh);

// Nside, or 0 for a NULL handle.
//
// # Safety
// `mesh` must be NULL or a live handle.
size_t sbsa_mesh_nside(const struct SbsaMesh *mesh);

// Copies pixel-centre latitude and longitude in radians into two buffers of
// length `len`, which must equal the pixel count.
//
// # Safety
// `mesh` must be a live handle; `lat` and `lon` must each hold `len` doubles.
enum SbsaStatus sbsa_mesh_lonlat(const struct SbsaMesh *mesh, double *lat, double *lon, size_t len);

// Nested pixel index containing a point given in radians.
//
// # Safety
// `out` must be a valid pointer.
enum SbsaStatus sbsa_ang2pix(size_t nside, double lat, double lon, size_t *out);

// Fair CRPS of `n >= 2` ensemble members against a scalar truth.
//
// # Safety
// `members` must hold `n` doubles and `out` must be a valid pointer.
enum SbsaStatus sbsa_fair_crps(const double *members, size_t n, double truth, double *out);

// Degree power spectrum of a row-major `h x w` equiangular field.
//
// Writes `n_max + 1` values into `out`, whose capacity is `out_len`.
//
// # Safety
// `field` must hold `h * w` doubles and `out` must hold `out_len` doubles.
enum SbsaStatus sbsa_power_spectrum(const double *field,
                                    size_t h,
                                    size_t w,
                                    size_t n_max,
                                    double *out,
                                    size_t out_len);

// Multiply-accumulate count of the three-branch sparse attention core for
// `n` tokens.
//
// # Safety
// `shape` and `out` must be valid pointers.
enum SbsaStatus sbsa_attention_macs(const struct SbsaAttentionShape *shape,
                                    size_t n,
                                    uint64_t *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* SPHERE_BSA_H */
