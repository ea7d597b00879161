#pragma once

#include <stdexcept>
#include <string>

namespace voxrnn {

class error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

#define VOXRNN_DEFINE_ERROR(name)                  \
    class name : public error {                    \
    public:                                        \
        using error::error;                        \
    }

VOXRNN_DEFINE_ERROR(shape_error);
VOXRNN_DEFINE_ERROR(parameter_error);
VOXRNN_DEFINE_ERROR(data_error);
VOXRNN_DEFINE_ERROR(empty_loss_error);
VOXRNN_DEFINE_ERROR(oracle_error);
VOXRNN_DEFINE_ERROR(usage_error);
VOXRNN_DEFINE_ERROR(config_error);
VOXRNN_DEFINE_ERROR(capacity_error);
VOXRNN_DEFINE_ERROR(training_error);
VOXRNN_DEFINE_ERROR(io_error);

#undef VOXRNN_DEFINE_ERROR

} // namespace voxrnn
