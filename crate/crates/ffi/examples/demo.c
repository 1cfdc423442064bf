#include <stdio.h>
#include "sphere_bsa.h"
int main(void) {
  SbsaMesh *m = NULL;
  if (sbsa_mesh_new(8, &m) != SBSA_STATUS_OK) return 1;
  printf("npix %zu\n", sbsa_mesh_npix(m));
  sbsa_mesh_free(m);
  if (sbsa_mesh_new(3, &m) != SBSA_STATUS_INVALID_ARGUMENT) return 2;
  printf("err: %s\n", sbsa_last_error());
  double xs[2] = {1.0, 3.0}, c;
  sbsa_fair_crps(xs, 2, 0.0, &c);
  printf("crps %g\n", c);
  return 0;
}
