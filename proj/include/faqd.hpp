#pragma once

#include "faqd/config.hpp"
#include "faqd/verify.hpp"
