/* Generated by loomfuse from 'laplace5'. */
#ifndef LOOMFUSE_LAPLACE5_H
#define LOOMFUSE_LAPLACE5_H

/* External buffers (row-major, index = cell - lower bound): */
/*   double g_out: j[1, 7) x i[1, 7) (output) */
/*   double g_cell: j[0, 8) x i[0, 8) (input) */

void laplace5(double n, double e, double s, double w, double c, double *o);

void laplace5_fused(double *g_out, double *g_cell);

#endif /* LOOMFUSE_LAPLACE5_H */
