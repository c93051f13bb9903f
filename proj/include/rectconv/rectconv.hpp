#pragma once

#include "rectconv/benchmark.hpp"
#include "rectconv/box.hpp"
#include "rectconv/bundle.hpp"
#include "rectconv/camera.hpp"
#include "rectconv/detection_io.hpp"
#include "rectconv/error.hpp"
#include "rectconv/image_io.hpp"
#include "rectconv/metrics.hpp"
#include "rectconv/network.hpp"
#include "rectconv/nn.hpp"
#include "rectconv/offset_field.hpp"
#include "rectconv/rectify.hpp"
#include "rectconv/sample_networks.hpp"
#include "rectconv/tensor.hpp"
#include "rectconv/warp_compare.hpp"
