#include "robself/optimize.hpp"

#include <cstdio>
#include <ostream>

namespace robself::opt {

void OptimTrace::write_csv(std::ostream& out) const {
    out << "iter,lr,loss_sr,loss_trans,loss_total,ms\n";
    char buf[160];
    for (const auto& r : rows) {
        std::snprintf(buf, sizeof buf, "%d,%.17g,%.17g,%.17g,%.17g,%.3f\n", r.iter, r.lr, r.loss_sr, r.loss_trans,
                      r.loss_total, r.ms);
        out << buf;
    }
}

}  // namespace robself::opt
