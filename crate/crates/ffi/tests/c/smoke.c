#include <stdio.h>
#include <stdlib.h>
#include "jumpest.h"

#define CHECK(call)                                                      \
    do {                                                                 \
        JeStatus s_ = (call);                                            \
        if (s_ != JE_STATUS_OK) {                                        \
            fprintf(stderr, "%s -> %d: %s\n", #call, (int)s_,            \
                    je_last_error_message());                            \
            return 1;                                                    \
        }                                                                \
    } while (0)

int main(void) {
    JeModel *model = NULL;
    JePath *path = NULL;
    JeEstimate *est = NULL;
    double theta[2] = {1.0, 0.5};
    double hat[2], se[2];

    CHECK(je_model_new_builtin("quadratic_ef_model", &model));
    if (je_model_dim(model) != 2) return 1;
    CHECK(je_simulate(model, theta, 2, 4000, 0.02, 5, &path));
    if (je_path_len(path) != 4001) return 1;
    CHECK(je_estimate(model, path, "quadratic", &est));
    CHECK(je_estimate_theta(est, hat, 2));
    CHECK(je_estimate_std_errors(est, se, 2));
    printf("%.6f %.6f %.6f %.6f %d\n", hat[0], hat[1], se[0], se[1], je_estimate_converged(est));

    if (je_model_new_builtin("no_such_model", &model) != JE_STATUS_CONFIG) return 1;
    if (je_last_error_message() == NULL) return 1;

    je_estimate_free(est);
    je_path_free(path);
    je_model_free(model);
    return 0;
}
